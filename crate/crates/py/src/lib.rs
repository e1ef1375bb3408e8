//! Python bindings: an in-process cluster, a blocking client, Ketama
//! placement and the frame codec.

use std::path::PathBuf;
use std::time::Duration;

use burstbuf::bench::{run_workload, Backend, BenchConfig, Mode};
use burstbuf::net::{null_sink, BbClient, LocalCluster};
use burstbuf::placement::{key_hash, KetamaRing, RecordKey, Strategy};
use burstbuf::ring::ServerId;
use burstbuf::wire::{decode_frame, encode_frame, MsgType};
use burstbuf::ServerConfig;
use bytes::Bytes;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A manager plus `servers` buffer servers on loopback.
#[pyclass(module = "pyburstbuf")]
pub struct Cluster {
    inner: Option<LocalCluster>,
}

impl Cluster {
    fn get(&self) -> PyResult<&LocalCluster> {
        self.inner.as_ref().ok_or_else(|| runtime_err("cluster is shut down"))
    }
}

#[pymethods]
impl Cluster {
    #[new]
    #[pyo3(signature = (servers, root, mem_capacity = 1 << 30, replicas = 2, redirect = true, spill_sync = true))]
    fn new(
        py: Python<'_>,
        servers: usize,
        root: PathBuf,
        mem_capacity: u64,
        replicas: usize,
        redirect: bool,
        spill_sync: bool,
    ) -> PyResult<Self> {
        if servers == 0 {
            return Err(value_err("need at least one server"));
        }
        let mut cfg = ServerConfig::new("", "");
        cfg.mem_capacity = mem_capacity;
        cfg.spill_dir = root.join("spill");
        cfg.pfs_dir = root.join("pfs");
        cfg.replicas = replicas;
        cfg.redirect = redirect;
        cfg.spill_sync = spill_sync;
        let c = py
            .detach(|| LocalCluster::start(servers, &cfg, null_sink()))
            .map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Cluster { inner: Some(c) })
    }

    #[getter]
    fn manager_addr(&self) -> PyResult<String> {
        Ok(self.get()?.manager_addr.clone())
    }

    #[getter]
    fn server_addrs(&self) -> PyResult<Vec<String>> {
        Ok(self.get()?.addrs.clone())
    }

    /// Stop server `index` abruptly.
    fn kill(&mut self, py: Python<'_>, index: usize) -> PyResult<()> {
        let c = self.inner.as_mut().ok_or_else(|| runtime_err("cluster is shut down"))?;
        if index >= c.addrs.len() {
            return Err(value_err(format!("no server {index}")));
        }
        py.detach(|| c.kill(index));
        Ok(())
    }

    fn shutdown(&mut self, py: Python<'_>) {
        if let Some(c) = self.inner.take() {
            py.detach(move || drop(c));
        }
    }

    fn __enter__(slf: Py<Self>) -> Py<Self> {
        slf
    }

    fn __exit__(&mut self, py: Python<'_>, _t: Py<PyAny>, _v: Py<PyAny>, _tb: Py<PyAny>) -> bool {
        self.shutdown(py);
        false
    }
}

/// Blocking client session.
#[pyclass(module = "pyburstbuf")]
pub struct Client {
    inner: Option<BbClient>,
}

impl Client {
    fn get(&self) -> PyResult<&BbClient> {
        self.inner.as_ref().ok_or_else(|| runtime_err("client is closed"))
    }
}

#[pymethods]
impl Client {
    #[new]
    #[pyo3(signature = (manager_addr, rank = 0, placement = "ketama"))]
    fn new(py: Python<'_>, manager_addr: String, rank: u32, placement: &str) -> PyResult<Self> {
        let strategy: Strategy = placement.parse().map_err(value_err)?;
        let c = py
            .detach(|| BbClient::open(&manager_addr, rank, strategy))
            .map_err(runtime_err)?;
        Ok(Client { inner: Some(c) })
    }

    #[getter]
    fn rank(&self) -> PyResult<u32> {
        Ok(self.get()?.rank())
    }

    #[getter]
    fn epoch(&self) -> PyResult<u32> {
        Ok(self.get()?.epoch())
    }

    #[setter]
    fn set_epoch(&self, epoch: u32) -> PyResult<()> {
        self.get()?.set_epoch(epoch);
        Ok(())
    }

    /// Queue one record. Returns its sequence number.
    fn write(&self, py: Python<'_>, file_id: String, offset: u64, data: &[u8]) -> PyResult<u64> {
        let c = self.get()?;
        let payload = Bytes::copy_from_slice(data);
        py.detach(|| c.write(&file_id, offset, payload)).map_err(runtime_err)
    }

    /// Wait until every queued record is acknowledged.
    fn wait(&self, py: Python<'_>) -> PyResult<()> {
        let c = self.get()?;
        py.detach(|| c.wait()).map_err(runtime_err)
    }

    #[pyo3(signature = (file_id, offset, length, epoch = None))]
    fn read<'py>(
        &self,
        py: Python<'py>,
        file_id: String,
        offset: u64,
        length: u64,
        epoch: Option<u32>,
    ) -> PyResult<Bound<'py, PyBytes>> {
        let c = self.get()?;
        let data = py
            .detach(|| match epoch {
                Some(e) => c.read_epoch(&file_id, offset, length, e),
                None => c.read(&file_id, offset, length),
            })
            .map_err(runtime_err)?;
        Ok(PyBytes::new(py, &data))
    }

    fn flush(&self, py: Python<'_>, epoch: u32) -> PyResult<()> {
        let c = self.get()?;
        py.detach(|| c.flush(epoch)).map_err(runtime_err)
    }

    fn close(&mut self, py: Python<'_>) {
        if let Some(c) = self.inner.take() {
            py.detach(move || c.close());
        }
    }
}

/// Consistent-hash ring over server addresses; ids follow list order.
#[pyclass(module = "pyburstbuf")]
pub struct Ketama {
    ring: KetamaRing,
}

#[pymethods]
impl Ketama {
    #[new]
    #[pyo3(signature = (addrs, points_per_server = 160))]
    fn new(addrs: Vec<String>, points_per_server: usize) -> PyResult<Self> {
        let ids: Vec<ServerId> = addrs.iter().enumerate().map(|(i, a)| ServerId::new(i as u32, a)).collect();
        let ring = KetamaRing::with_points(&ids, points_per_server).map_err(value_err)?;
        Ok(Ketama { ring })
    }

    /// Address owning `<file_id>@<offset>`.
    fn locate(&self, file_id: &str, offset: u64) -> String {
        self.ring.locate(&RecordKey::new(file_id, offset)).addr.clone()
    }

    fn locate_hash(&self, hash: u32) -> String {
        self.ring.locate_hash(hash).addr.clone()
    }

    fn __len__(&self) -> usize {
        self.ring.len()
    }
}

/// MD5-based key hash used for placement.
#[pyfunction(name = "key_hash")]
fn py_key_hash(key: &str) -> u32 {
    key_hash(key)
}

/// Frame a payload: 17-byte header followed by the payload.
#[pyfunction(name = "encode_frame")]
fn py_encode_frame<'py>(py: Python<'py>, msg_type: u8, seq: u64, payload: &[u8]) -> PyResult<Bound<'py, PyBytes>> {
    let t = MsgType::from_code(msg_type).ok_or_else(|| value_err(format!("unknown message type {msg_type:#04x}")))?;
    let v = encode_frame(t, seq, payload).map_err(value_err)?;
    Ok(PyBytes::new(py, &v))
}

/// Decode the frame at the start of `data` into `(type, seq, payload, used)`.
#[pyfunction(name = "decode_frame")]
fn py_decode_frame<'py>(py: Python<'py>, data: &[u8]) -> PyResult<(u8, u64, Bound<'py, PyBytes>, usize)> {
    let (f, used) = decode_frame(data).map_err(value_err)?;
    Ok((f.msg_type.code(), f.seq, PyBytes::new(py, &f.payload), used))
}

/// Run the checkpoint benchmark and return one dict per iteration.
#[pyfunction]
#[pyo3(signature = (root, clients = 2, servers = 2, transfer_size = 1 << 20, data_per_client = 16 << 20,
                    iterations = 1, mode = "sf", backend = "bb", placement = "ketama", verify = true,
                    mem_capacity = 1 << 30, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn run_bench<'py>(
    py: Python<'py>,
    root: PathBuf,
    clients: u32,
    servers: usize,
    transfer_size: u64,
    data_per_client: u64,
    iterations: u32,
    mode: &str,
    backend: &str,
    placement: &str,
    verify: bool,
    mem_capacity: u64,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = BenchConfig {
        mode: mode.parse::<Mode>().map_err(value_err)?,
        clients,
        servers,
        transfer_size,
        data_per_client,
        iterations,
        inter_test_delay: Duration::ZERO,
        backend: backend.parse::<Backend>().map_err(value_err)?,
        placement: placement.parse::<Strategy>().map_err(value_err)?,
        verify,
        pfs_dir: root.join("pfs"),
        spill_dir: root.join("spill"),
        mem_capacity,
        seed,
        ..BenchConfig::default()
    };
    let report = py.detach(|| run_workload(&cfg)).map_err(runtime_err)?;
    if let Some(e) = &report.error {
        return Err(runtime_err(e));
    }
    report
        .iterations
        .iter()
        .map(|it| {
            let d = PyDict::new(py);
            d.set_item("iteration", it.iteration)?;
            d.set_item("bytes", it.bytes())?;
            d.set_item("seconds", it.max_seconds())?;
            d.set_item("bandwidth", it.aggregate_bandwidth())?;
            d.set_item("flush_seconds", it.flush_seconds)?;
            d.set_item("verified", it.verified)?;
            d.set_item("digest", it.digest.clone())?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
pub fn pyburstbuf(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Cluster>()?;
    m.add_class::<Client>()?;
    m.add_class::<Ketama>()?;
    m.add_function(wrap_pyfunction!(py_key_hash, m)?)?;
    m.add_function(wrap_pyfunction!(py_encode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(py_decode_frame, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add("HEADER_LEN", burstbuf::wire::HEADER_LEN)?;
    Ok(())
}
