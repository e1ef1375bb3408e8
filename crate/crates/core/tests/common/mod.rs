//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use burstbuf::ring::{Member, ServerId};
use burstbuf::wire::*;
use burstbuf::WriteRecord;
use bytes::Bytes;
use serde::Deserialize;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

#[derive(Deserialize)]
pub struct GoldenFrame {
    pub name: String,
    #[serde(rename = "type")]
    pub msg_type: u8,
    pub seq: u64,
    pub frame: String,
}

#[derive(Deserialize)]
pub struct GoldenSpill {
    pub file_id: String,
    pub offset: u64,
    pub epoch: u32,
    pub client: u32,
    pub seq: u64,
    pub payload: String,
    pub bytes: String,
}

#[derive(Deserialize)]
pub struct WireGolden {
    pub frames: Vec<GoldenFrame>,
    pub spill_records: Vec<GoldenSpill>,
}

#[derive(Deserialize)]
pub struct Abcd {
    pub servers: Vec<String>,
    pub points: usize,
    pub first_points: Vec<(u32, String)>,
    pub key: String,
    pub key_hash: u32,
    pub owner: String,
}

#[derive(Deserialize)]
pub struct Distribution {
    pub servers: Vec<String>,
    pub keys: usize,
    pub counts: Vec<usize>,
    pub fractions: Vec<f64>,
}

#[derive(Deserialize)]
pub struct KetamaGolden {
    pub points_per_server: usize,
    pub abcd: Abcd,
    pub distribution: Distribution,
}

pub fn wire_golden() -> WireGolden {
    let text = std::fs::read_to_string(golden_dir().join("wire_frames.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

pub fn ketama_golden() -> KetamaGolden {
    let text = std::fs::read_to_string(golden_dir().join("ketama.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Key `i` of the distribution key set, as `(file_id, offset)`.
pub fn bench_key(i: usize) -> (String, u64) {
    (format!("ckpt/file{}", i % 97), (i / 97) as u64 * 1_048_576)
}

pub fn ids(addrs: &[String]) -> Vec<ServerId> {
    addrs.iter().enumerate().map(|(i, a)| ServerId::new(i as u32, a)).collect()
}

fn sid(id: u32, addr: &str) -> ServerId {
    ServerId::new(id, addr)
}

fn rec(file_id: &str, offset: u64, epoch: u32, client: u32, seq: u64, payload: &[u8]) -> WriteRecord {
    WriteRecord {
        file_id: file_id.into(),
        offset,
        epoch,
        client,
        seq,
        payload: Bytes::copy_from_slice(payload),
    }
}

fn neighbor() -> NeighborInfo {
    NeighborInfo {
        from: sid(2, "10.0.1.3:7100"),
        predecessor: sid(1, "10.0.1.2:7100"),
        successors: vec![sid(3, "10.0.1.4:7100"), sid(0, "10.0.1.1:7100")],
        version: 5,
        members: vec![
            Member {
                server: sid(0, "10.0.1.1:7100"),
                anchor: None,
                joined: 1,
                failed: None,
            },
            Member {
                server: sid(4, "10.0.1.5:7100"),
                anchor: Some(3),
                joined: 4,
                failed: Some(5),
            },
        ],
    }
}

fn mem_query() -> MemQuery {
    MemQuery {
        origin: sid(1, "b"),
        visited: vec![(sid(1, "b"), 1000), (sid(3, "d"), 52_428_800)],
    }
}

/// The messages behind `wire_frames.json`, keyed by name.
pub fn golden_message(name: &str) -> Message {
    let r = || rec("ckpt/file0", 1_048_576, 7, 3, 42, b"hello burst buffer");
    match name {
        "put" => Message::Put(Put { flags: 0, record: r() }),
        "put_forced" => Message::Put(Put {
            flags: PUT_FLAG_FORCE,
            record: rec("f", 0, 1, 0, 0, b""),
        }),
        "put_ack" => Message::PutAck { server: 2 },
        "repl_put" => Message::ReplPut(ReplPut {
            origin: 1,
            hops_remaining: 1,
            record: r(),
        }),
        "repl_ack" => Message::ReplAck { rseq: 77, acker: 3 },
        "get" => Message::Get(GetReq {
            file_id: "ckpt/file0".into(),
            offset: 0,
            length: 4096,
            epoch: LATEST_EPOCH,
            lane: Lane::Staged,
        }),
        "get_resp" => Message::GetResp(GetResp {
            last: true,
            pieces: vec![r(), rec("x", 8, 2, 1, 1, &[0, 0xff])],
        }),
        "redirect" => Message::Redirect {
            target: sid(3, "10.0.1.4:7100"),
            free_bytes: 268_435_456,
        },
        "mem_query" => Message::MemQuery(mem_query()),
        "mem_resp" => Message::MemResp(mem_query()),
        "ping" => Message::Ping { from: 4 },
        "ping_ack" => Message::PingAck { from: 5 },
        "neighbor_query" => Message::NeighborQuery(neighbor()),
        "neighbor_resp" => Message::NeighborResp(neighbor()),
        "fail_report_server" => Message::FailReport {
            subject: sid(2, "10.0.1.3:7100"),
            reporter: Reporter::Server(1),
            version: 6,
        },
        "fail_report_client" => Message::FailReport {
            subject: sid(2, "10.0.1.3:7100"),
            reporter: Reporter::Client(7),
            version: 6,
        },
        "fail_confirm_req" => Message::FailConfirmReq {
            subject: sid(2, "10.0.1.3:7100"),
        },
        "fail_confirm_resp" => Message::FailConfirmResp {
            subject: 2,
            confirmed: true,
        },
        "join_req" => Message::JoinReq {
            addr: "10.0.1.9:7100".into(),
            predecessor: 3,
        },
        "ring_update" => Message::RingUpdate(ServerList {
            version: 8,
            servers: vec![sid(0, "a"), sid(1, "b"), sid(5, "c")],
        }),
        "register_server" => Message::Register(Register {
            role: Role::Server,
            rank: 0,
            addr: "10.0.1.1:7100".into(),
        }),
        "register_client" => Message::Register(Register {
            role: Role::Client,
            rank: 12,
            addr: String::new(),
        }),
        "register_hello" => Message::Register(Register {
            role: Role::Hello,
            rank: 0,
            addr: "10.0.0.1:7000".into(),
        }),
        "flush_cmd" => Message::FlushCmd(FlushCmd {
            flush_id: 3,
            epoch: 2,
            abort: false,
            ordering: vec![sid(0, "a"), sid(1, "b")],
        }),
        "flush_cmd_client" => Message::FlushCmd(FlushCmd {
            flush_id: 0,
            epoch: 2,
            abort: false,
            ordering: vec![],
        }),
        "shuffle_meta" => Message::ShuffleMeta(ShuffleMeta {
            flush_id: 3,
            from: 1,
            files: vec![
                FileExtent {
                    file_id: "ior/testfile".into(),
                    extent: 268_435_456,
                    max_epoch: 2,
                },
                FileExtent {
                    file_id: "ior/testfile.00001".into(),
                    extent: 4096,
                    max_epoch: 1,
                },
            ],
        }),
        "shuffle_piece" => Message::ShuffleData(ShuffleData::Piece {
            flush_id: 3,
            from: 1,
            piece: r(),
        }),
        "shuffle_end" => Message::ShuffleData(ShuffleData::End {
            flush_id: 3,
            from: 1,
            count: 64,
        }),
        "flush_done" => Message::FlushDone(FlushDone {
            flush_id: 3,
            epoch: 2,
            from: 1,
            ok: true,
            files: 1,
            bytes: 67_108_864,
        }),
        "lookup_req" => Message::LookupReq(LookupReq {
            file_id: "ckpt/file0".into(),
            offset: 4096,
            length: 8192,
            epoch: LATEST_EPOCH,
        }),
        "lookup_broadcast" => Message::LookupResp(LookupRoute::Broadcast),
        "lookup_owners" => Message::LookupResp(LookupRoute::Owners {
            epoch: 2,
            owners: vec![(sid(0, "a"), 0, 4096), (sid(1, "b"), 4096, 4096)],
        }),
        "error" => Message::Error(ErrorMsg {
            code: ErrorCode::Retry,
            request: MsgType::Put,
            retry_after_ms: 250,
            detail: "memory full".into(),
        }),
        other => panic!("no golden message {other}"),
    }
}

pub fn unhex(s: &str) -> Vec<u8> {
    hex::decode(s).expect("bad hex in golden file")
}

/// Every golden frame: encodes to the stored bytes and decodes back to the
/// same message. Returns the names that failed.
pub fn check_wire_golden() -> Vec<String> {
    let g = wire_golden();
    let mut bad = Vec::new();
    for f in &g.frames {
        let want = unhex(&f.frame);
        let pkt = Packet::new(f.seq, golden_message(&f.name));
        let enc = pkt.encode().unwrap();
        let mut streamed = Vec::new();
        pkt.write_to(&mut streamed).unwrap();
        let dec = decode_frame(&want).ok().and_then(|(fr, used)| {
            (used == want.len() && fr.msg_type.code() == f.msg_type).then(|| Packet::from_frame(fr).ok()).flatten()
        });
        if enc != want || streamed != want || dec.as_ref() != Some(&pkt) {
            bad.push(f.name.clone());
        }
    }
    bad
}

pub mod gen {
    //! Random protocol messages.
    use super::*;
    use rand::rngs::SmallRng;
    use rand::{Rng, RngCore};

    pub fn string(rng: &mut SmallRng, max: usize) -> String {
        let n = rng.random_range(0..=max);
        (0..n)
            .map(|_| match rng.random_range(0..10) {
                0 => 'é',
                1 => '/',
                2 => '漢',
                _ => rng.random_range(b'a'..=b'z') as char,
            })
            .collect()
    }

    pub fn server(rng: &mut SmallRng) -> ServerId {
        ServerId::new(rng.random(), format!("10.{}.{}.{}:{}", rng.random::<u8>(), rng.random::<u8>(), rng.random::<u8>(), rng.random::<u16>()))
    }

    fn servers(rng: &mut SmallRng) -> Vec<ServerId> {
        (0..rng.random_range(0..6)).map(|_| server(rng)).collect()
    }

    pub fn record(rng: &mut SmallRng) -> WriteRecord {
        // Mostly small payloads, sometimes big enough to be sent by reference.
        let len = if rng.random_bool(0.1) { rng.random_range(4096..20000) } else { rng.random_range(0..300) };
        let mut payload = vec![0u8; len];
        rng.fill_bytes(&mut payload);
        WriteRecord {
            file_id: string(rng, 24),
            offset: rng.random(),
            epoch: rng.random(),
            client: rng.random(),
            seq: rng.random(),
            payload: Bytes::from(payload),
        }
    }

    fn member(rng: &mut SmallRng) -> Member {
        Member {
            server: server(rng),
            anchor: rng.random_bool(0.5).then(|| rng.random()),
            joined: rng.random(),
            failed: rng.random_bool(0.5).then(|| rng.random()),
        }
    }

    fn neighbor(rng: &mut SmallRng) -> NeighborInfo {
        NeighborInfo {
            from: server(rng),
            predecessor: server(rng),
            successors: servers(rng),
            version: rng.random(),
            members: (0..rng.random_range(0..5)).map(|_| member(rng)).collect(),
        }
    }

    fn mem_query(rng: &mut SmallRng) -> MemQuery {
        MemQuery {
            origin: server(rng),
            visited: (0..rng.random_range(0..5)).map(|_| (server(rng), rng.random())).collect(),
        }
    }

    pub fn message(rng: &mut SmallRng, t: MsgType) -> Message {
        match t {
            MsgType::Put => Message::Put(Put { flags: rng.random::<u8>() & 1, record: record(rng) }),
            MsgType::PutAck => Message::PutAck { server: rng.random() },
            MsgType::ReplPut => Message::ReplPut(ReplPut {
                origin: rng.random(),
                hops_remaining: rng.random(),
                record: record(rng),
            }),
            MsgType::ReplAck => Message::ReplAck { rseq: rng.random(), acker: rng.random() },
            MsgType::Get => Message::Get(GetReq {
                file_id: string(rng, 30),
                offset: rng.random(),
                length: rng.random(),
                epoch: rng.random(),
                lane: if rng.random() { Lane::Ingest } else { Lane::Staged },
            }),
            MsgType::GetResp => Message::GetResp(GetResp {
                last: rng.random(),
                pieces: (0..rng.random_range(0..4)).map(|_| record(rng)).collect(),
            }),
            MsgType::Redirect => Message::Redirect { target: server(rng), free_bytes: rng.random() },
            MsgType::MemQuery => Message::MemQuery(mem_query(rng)),
            MsgType::MemResp => Message::MemResp(mem_query(rng)),
            MsgType::Ping => Message::Ping { from: rng.random() },
            MsgType::PingAck => Message::PingAck { from: rng.random() },
            MsgType::NeighborQuery => Message::NeighborQuery(neighbor(rng)),
            MsgType::NeighborResp => Message::NeighborResp(neighbor(rng)),
            MsgType::FailReport => Message::FailReport {
                subject: server(rng),
                reporter: if rng.random() { Reporter::Server(rng.random()) } else { Reporter::Client(rng.random()) },
                version: rng.random(),
            },
            MsgType::FailConfirmReq => Message::FailConfirmReq { subject: server(rng) },
            MsgType::FailConfirmResp => Message::FailConfirmResp { subject: rng.random(), confirmed: rng.random() },
            MsgType::JoinReq => Message::JoinReq { addr: string(rng, 20), predecessor: rng.random() },
            MsgType::RingUpdate => Message::RingUpdate(ServerList { version: rng.random(), servers: servers(rng) }),
            MsgType::Register => Message::Register(Register {
                role: [Role::Server, Role::Client, Role::Hello][rng.random_range(0..3)],
                rank: rng.random(),
                addr: string(rng, 20),
            }),
            MsgType::FlushCmd => Message::FlushCmd(FlushCmd {
                flush_id: rng.random(),
                epoch: rng.random(),
                abort: rng.random(),
                ordering: servers(rng),
            }),
            MsgType::ShuffleMeta => Message::ShuffleMeta(ShuffleMeta {
                flush_id: rng.random(),
                from: rng.random(),
                files: (0..rng.random_range(0..4))
                    .map(|_| FileExtent { file_id: string(rng, 20), extent: rng.random(), max_epoch: rng.random() })
                    .collect(),
            }),
            MsgType::ShuffleData => {
                if rng.random() {
                    Message::ShuffleData(ShuffleData::Piece { flush_id: rng.random(), from: rng.random(), piece: record(rng) })
                } else {
                    Message::ShuffleData(ShuffleData::End { flush_id: rng.random(), from: rng.random(), count: rng.random() })
                }
            }
            MsgType::FlushDone => Message::FlushDone(FlushDone {
                flush_id: rng.random(),
                epoch: rng.random(),
                from: rng.random(),
                ok: rng.random(),
                files: rng.random(),
                bytes: rng.random(),
            }),
            MsgType::LookupReq => Message::LookupReq(LookupReq {
                file_id: string(rng, 20),
                offset: rng.random(),
                length: rng.random(),
                epoch: rng.random(),
            }),
            MsgType::LookupResp => {
                if rng.random_bool(0.3) {
                    Message::LookupResp(LookupRoute::Broadcast)
                } else {
                    Message::LookupResp(LookupRoute::Owners {
                        epoch: rng.random(),
                        owners: (0..rng.random_range(0..5)).map(|_| (server(rng), rng.random(), rng.random())).collect(),
                    })
                }
            }
            MsgType::Error => Message::Error(ErrorMsg {
                code: [ErrorCode::NotFound, ErrorCode::Retry, ErrorCode::StorageExhausted, ErrorCode::Protocol, ErrorCode::Rejected, ErrorCode::Range]
                    [rng.random_range(0..6)],
                request: MsgType::ALL[rng.random_range(0..MsgType::ALL.len())],
                retry_after_ms: rng.random(),
                detail: string(rng, 40),
            }),
        }
    }

    pub fn packet(rng: &mut SmallRng) -> Packet {
        let t = MsgType::ALL[rng.random_range(0..MsgType::ALL.len())];
        Packet::new(rng.random(), message(rng, t))
    }
}

/// Encode `n` random packets, push the byte stream through a decoder in
/// random-sized chunks and compare. Returns the number of mismatches.
pub fn random_roundtrips(seed: u64, n: usize) -> usize {
    use rand::{Rng, SeedableRng};
    let mut rng = rand::rngs::SmallRng::seed_from_u64(seed);
    let mut failures = 0;
    let mut dec = FrameDecoder::new(DEFAULT_MAX_PAYLOAD);
    for _ in 0..n {
        let pkt = gen::packet(&mut rng);
        let bytes = match pkt.encode() {
            Ok(b) => b,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let mut streamed = Vec::new();
        pkt.write_to(&mut streamed).unwrap();
        if streamed != bytes {
            failures += 1;
            continue;
        }
        let mut got = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let step = rng.random_range(1..=bytes.len() - pos);
            dec.extend(&bytes[pos..pos + step]);
            pos += step;
            while let Ok(Some(f)) = dec.next_frame() {
                got.push(f);
            }
        }
        let ok = got.len() == 1 && Packet::from_frame(got.pop().unwrap()).ok().as_ref() == Some(&pkt);
        if !ok {
            failures += 1;
        }
    }
    failures
}
