use bytes::Bytes;

use super::{Frame, MsgType, PayloadReader, PayloadWriter, WireError};
use crate::ring::{Member, ServerId};
use crate::store::WriteRecord;

/// Set on a PUT that must be stored by its receiver even when its memory tier
/// is full (no redirect).
pub const PUT_FLAG_FORCE: u8 = 0x01;

/// Epoch value meaning "newest buffered epoch".
pub const LATEST_EPOCH: u32 = u32::MAX;

/// A typed message together with its frame sequence number.
#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub seq: u64,
    pub msg: Message,
}

impl Packet {
    pub fn new(seq: u64, msg: Message) -> Self {
        Packet { seq, msg }
    }

    pub fn to_frame(&self) -> Frame {
        Frame {
            msg_type: self.msg.msg_type(),
            seq: self.seq,
            payload: self.msg.encode_payload(),
        }
    }

    pub fn from_frame(frame: Frame) -> Result<Packet, WireError> {
        let msg = Message::decode(frame.msg_type, frame.payload)?;
        Ok(Packet {
            seq: frame.seq,
            msg,
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        self.to_frame().encode()
    }

    /// Write the frame without assembling it in memory first.
    pub fn write_to<W: std::io::Write>(&self, w: &mut W) -> Result<(), WireError> {
        let parts = self.msg.encode_parts();
        let len: usize = parts.iter().map(|p| p.len()).sum();
        w.write_all(&super::frame_header(self.msg.msg_type(), self.seq, len)?)?;
        for p in &parts {
            w.write_all(p)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Role {
    /// Server announcing itself to the manager for ring bootstrap.
    Server = 0,
    /// Client session opening.
    Client = 1,
    /// First frame on every connection; identifies the dialing endpoint.
    Hello = 2,
}

impl Role {
    fn from_u8(v: u8) -> Option<Role> {
        match v {
            0 => Some(Role::Server),
            1 => Some(Role::Client),
            2 => Some(Role::Hello),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Register {
    pub role: Role,
    /// Client rank (clients) or 0.
    pub rank: u32,
    /// Listen address (servers, manager) or empty.
    pub addr: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Put {
    pub flags: u8,
    pub record: WriteRecord,
}

impl Put {
    pub fn forced(&self) -> bool {
        self.flags & PUT_FLAG_FORCE != 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplPut {
    pub origin: u32,
    pub hops_remaining: u8,
    pub record: WriteRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Lane {
    /// Records as ingested from clients (primary and replica copies).
    Ingest = 0,
    /// Domain data staged by a flush shuffle.
    Staged = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GetReq {
    pub file_id: String,
    pub offset: u64,
    pub length: u64,
    pub epoch: u32,
    pub lane: Lane,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GetResp {
    pub last: bool,
    pub pieces: Vec<WriteRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemQuery {
    pub origin: ServerId,
    pub visited: Vec<(ServerId, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborInfo {
    pub from: ServerId,
    pub predecessor: ServerId,
    pub successors: Vec<ServerId>,
    pub version: u64,
    pub members: Vec<Member>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reporter {
    Server(u32),
    Client(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerList {
    pub version: u64,
    pub servers: Vec<ServerId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlushCmd {
    pub flush_id: u64,
    pub epoch: u32,
    pub abort: bool,
    /// Participating servers in ring order; empty on a client request.
    pub ordering: Vec<ServerId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileExtent {
    pub file_id: String,
    pub extent: u64,
    pub max_epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShuffleMeta {
    pub flush_id: u64,
    pub from: u32,
    pub files: Vec<FileExtent>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShuffleData {
    Piece {
        flush_id: u64,
        from: u32,
        piece: WriteRecord,
    },
    /// Sent after the last piece to one peer, with the number of pieces sent.
    End {
        flush_id: u64,
        from: u32,
        count: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlushDone {
    pub flush_id: u64,
    pub epoch: u32,
    pub from: u32,
    pub ok: bool,
    /// Files this server wrote a domain of.
    pub files: u32,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupReq {
    pub file_id: String,
    pub offset: u64,
    pub length: u64,
    pub epoch: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LookupRoute {
    /// The range is partitioned among these owners (flushed epoch).
    Owners {
        epoch: u32,
        owners: Vec<(ServerId, u64, u64)>,
    },
    /// No domain layout known; ask every server.
    Broadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    NotFound = 1,
    Retry = 2,
    StorageExhausted = 3,
    Protocol = 4,
    Rejected = 5,
    Range = 6,
}

impl ErrorCode {
    fn from_u16(v: u16) -> Option<ErrorCode> {
        Some(match v {
            1 => ErrorCode::NotFound,
            2 => ErrorCode::Retry,
            3 => ErrorCode::StorageExhausted,
            4 => ErrorCode::Protocol,
            5 => ErrorCode::Rejected,
            6 => ErrorCode::Range,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMsg {
    pub code: ErrorCode,
    /// Type of the request this error answers.
    pub request: MsgType,
    pub retry_after_ms: u32,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Put(Put),
    PutAck { server: u32 },
    ReplPut(ReplPut),
    ReplAck { rseq: u64, acker: u32 },
    Get(GetReq),
    GetResp(GetResp),
    Redirect { target: ServerId, free_bytes: u64 },
    MemQuery(MemQuery),
    MemResp(MemQuery),
    Ping { from: u32 },
    PingAck { from: u32 },
    NeighborQuery(NeighborInfo),
    NeighborResp(NeighborInfo),
    FailReport { subject: ServerId, reporter: Reporter, version: u64 },
    FailConfirmReq { subject: ServerId },
    FailConfirmResp { subject: u32, confirmed: bool },
    JoinReq { addr: String, predecessor: u32 },
    RingUpdate(ServerList),
    Register(Register),
    FlushCmd(FlushCmd),
    ShuffleMeta(ShuffleMeta),
    ShuffleData(ShuffleData),
    FlushDone(FlushDone),
    LookupReq(LookupReq),
    LookupResp(LookupRoute),
    Error(ErrorMsg),
}

fn put_server(w: &mut PayloadWriter, s: &ServerId) {
    w.u32(s.id).str(&s.addr);
}

fn get_server(r: &mut PayloadReader) -> Result<ServerId, WireError> {
    Ok(ServerId {
        id: r.u32()?,
        addr: r.str()?,
    })
}

fn put_servers(w: &mut PayloadWriter, list: &[ServerId]) {
    w.u32(list.len() as u32);
    for s in list {
        put_server(w, s);
    }
}

fn get_servers(r: &mut PayloadReader) -> Result<Vec<ServerId>, WireError> {
    let n = r.count(6)?;
    (0..n).map(|_| get_server(r)).collect()
}

/// file_id(str) offset(u64) epoch(u32) client(u32) seq(u64) payload(blob)
pub fn put_record(w: &mut PayloadWriter, rec: &WriteRecord) {
    w.str(&rec.file_id)
        .u64(rec.offset)
        .u32(rec.epoch)
        .u32(rec.client)
        .u64(rec.seq)
        .blob_bytes(&rec.payload);
}

pub fn get_record(r: &mut PayloadReader) -> Result<WriteRecord, WireError> {
    let file_id = r.str()?;
    let offset = r.u64()?;
    let epoch = r.u32()?;
    let client = r.u32()?;
    let seq = r.u64()?;
    let payload = r.blob()?;
    Ok(WriteRecord {
        file_id,
        offset,
        epoch,
        client,
        seq,
        payload,
    })
}

fn put_member(w: &mut PayloadWriter, m: &Member) {
    put_server(w, &m.server);
    match m.anchor {
        Some(a) => w.u8(1).u32(a),
        None => w.u8(0),
    };
    w.u64(m.joined);
    match m.failed {
        Some(v) => w.u8(1).u64(v),
        None => w.u8(0),
    };
}

fn get_member(r: &mut PayloadReader) -> Result<Member, WireError> {
    let server = get_server(r)?;
    let anchor = if r.bool()? { Some(r.u32()?) } else { None };
    let joined = r.u64()?;
    let failed = if r.bool()? { Some(r.u64()?) } else { None };
    Ok(Member {
        server,
        anchor,
        joined,
        failed,
    })
}

fn put_neighbor(w: &mut PayloadWriter, n: &NeighborInfo) {
    put_server(w, &n.from);
    put_server(w, &n.predecessor);
    put_servers(w, &n.successors);
    w.u64(n.version);
    w.u32(n.members.len() as u32);
    for m in &n.members {
        put_member(w, m);
    }
}

fn get_neighbor(r: &mut PayloadReader) -> Result<NeighborInfo, WireError> {
    let from = get_server(r)?;
    let predecessor = get_server(r)?;
    let successors = get_servers(r)?;
    let version = r.u64()?;
    let n = r.count(16)?;
    let members = (0..n).map(|_| get_member(r)).collect::<Result<_, _>>()?;
    Ok(NeighborInfo {
        from,
        predecessor,
        successors,
        version,
        members,
    })
}

fn put_mem_query(w: &mut PayloadWriter, q: &MemQuery) {
    put_server(w, &q.origin);
    w.u32(q.visited.len() as u32);
    for (s, free) in &q.visited {
        put_server(w, s);
        w.u64(*free);
    }
}

fn get_mem_query(r: &mut PayloadReader) -> Result<MemQuery, WireError> {
    let origin = get_server(r)?;
    let n = r.count(14)?;
    let visited = (0..n)
        .map(|_| Ok((get_server(r)?, r.u64()?)))
        .collect::<Result<_, WireError>>()?;
    Ok(MemQuery { origin, visited })
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Put(_) => MsgType::Put,
            Message::PutAck { .. } => MsgType::PutAck,
            Message::ReplPut(_) => MsgType::ReplPut,
            Message::ReplAck { .. } => MsgType::ReplAck,
            Message::Get(_) => MsgType::Get,
            Message::GetResp(_) => MsgType::GetResp,
            Message::Redirect { .. } => MsgType::Redirect,
            Message::MemQuery(_) => MsgType::MemQuery,
            Message::MemResp(_) => MsgType::MemResp,
            Message::Ping { .. } => MsgType::Ping,
            Message::PingAck { .. } => MsgType::PingAck,
            Message::NeighborQuery(_) => MsgType::NeighborQuery,
            Message::NeighborResp(_) => MsgType::NeighborResp,
            Message::FailReport { .. } => MsgType::FailReport,
            Message::FailConfirmReq { .. } => MsgType::FailConfirmReq,
            Message::FailConfirmResp { .. } => MsgType::FailConfirmResp,
            Message::JoinReq { .. } => MsgType::JoinReq,
            Message::RingUpdate(_) => MsgType::RingUpdate,
            Message::Register(_) => MsgType::Register,
            Message::FlushCmd(_) => MsgType::FlushCmd,
            Message::ShuffleMeta(_) => MsgType::ShuffleMeta,
            Message::ShuffleData(_) => MsgType::ShuffleData,
            Message::FlushDone(_) => MsgType::FlushDone,
            Message::LookupReq(_) => MsgType::LookupReq,
            Message::LookupResp(_) => MsgType::LookupResp,
            Message::Error(_) => MsgType::Error,
        }
    }

    pub fn encode_payload(&self) -> Bytes {
        self.writer().finish()
    }

    /// Payload segments; record data is shared, not copied.
    pub fn encode_parts(&self) -> Vec<Bytes> {
        self.writer().finish_parts()
    }

    fn writer(&self) -> PayloadWriter {
        let mut w = match self {
            Message::Put(p) => PayloadWriter::with_capacity(64 + p.record.payload.len()),
            Message::ReplPut(p) => PayloadWriter::with_capacity(64 + p.record.payload.len()),
            Message::ShuffleData(ShuffleData::Piece { piece, .. }) => {
                PayloadWriter::with_capacity(64 + piece.payload.len())
            }
            _ => PayloadWriter::new(),
        };
        match self {
            Message::Put(p) => {
                w.u8(p.flags);
                put_record(&mut w, &p.record);
            }
            Message::PutAck { server } => {
                w.u32(*server);
            }
            Message::ReplPut(p) => {
                w.u32(p.origin).u8(p.hops_remaining);
                put_record(&mut w, &p.record);
            }
            Message::ReplAck { rseq, acker } => {
                w.u64(*rseq).u32(*acker);
            }
            Message::Get(g) => {
                w.str(&g.file_id)
                    .u64(g.offset)
                    .u64(g.length)
                    .u32(g.epoch)
                    .u8(g.lane as u8);
            }
            Message::GetResp(g) => {
                w.bool(g.last).u32(g.pieces.len() as u32);
                for p in &g.pieces {
                    put_record(&mut w, p);
                }
            }
            Message::Redirect { target, free_bytes } => {
                put_server(&mut w, target);
                w.u64(*free_bytes);
            }
            Message::MemQuery(q) | Message::MemResp(q) => put_mem_query(&mut w, q),
            Message::Ping { from } | Message::PingAck { from } => {
                w.u32(*from);
            }
            Message::NeighborQuery(n) | Message::NeighborResp(n) => put_neighbor(&mut w, n),
            Message::FailReport {
                subject,
                reporter,
                version,
            } => {
                put_server(&mut w, subject);
                match reporter {
                    Reporter::Server(id) => w.u8(0).u32(*id),
                    Reporter::Client(rank) => w.u8(1).u32(*rank),
                };
                w.u64(*version);
            }
            Message::FailConfirmReq { subject } => put_server(&mut w, subject),
            Message::FailConfirmResp { subject, confirmed } => {
                w.u32(*subject).bool(*confirmed);
            }
            Message::JoinReq { addr, predecessor } => {
                w.str(addr).u32(*predecessor);
            }
            Message::RingUpdate(list) => {
                w.u64(list.version);
                put_servers(&mut w, &list.servers);
            }
            Message::Register(reg) => {
                w.u8(reg.role as u8).u32(reg.rank).str(&reg.addr);
            }
            Message::FlushCmd(cmd) => {
                w.u64(cmd.flush_id).u32(cmd.epoch).bool(cmd.abort);
                put_servers(&mut w, &cmd.ordering);
            }
            Message::ShuffleMeta(m) => {
                w.u64(m.flush_id).u32(m.from).u32(m.files.len() as u32);
                for f in &m.files {
                    w.str(&f.file_id).u64(f.extent).u32(f.max_epoch);
                }
            }
            Message::ShuffleData(ShuffleData::Piece {
                flush_id,
                from,
                piece,
            }) => {
                w.u8(0).u64(*flush_id).u32(*from);
                put_record(&mut w, piece);
            }
            Message::ShuffleData(ShuffleData::End {
                flush_id,
                from,
                count,
            }) => {
                w.u8(1).u64(*flush_id).u32(*from).u64(*count);
            }
            Message::FlushDone(d) => {
                w.u64(d.flush_id).u32(d.epoch).u32(d.from).bool(d.ok).u32(d.files).u64(d.bytes);
            }
            Message::LookupReq(l) => {
                w.str(&l.file_id).u64(l.offset).u64(l.length).u32(l.epoch);
            }
            Message::LookupResp(LookupRoute::Broadcast) => {
                w.u8(0);
            }
            Message::LookupResp(LookupRoute::Owners { epoch, owners }) => {
                w.u8(1).u32(*epoch).u32(owners.len() as u32);
                for (s, off, len) in owners {
                    put_server(&mut w, s);
                    w.u64(*off).u64(*len);
                }
            }
            Message::Error(e) => {
                w.u16(e.code as u16)
                    .u8(e.request.code())
                    .u32(e.retry_after_ms)
                    .str(&e.detail);
            }
        }
        w
    }

    pub fn decode(msg_type: MsgType, payload: Bytes) -> Result<Message, WireError> {
        let mut r = PayloadReader::new(msg_type, payload);
        let bad = |reason: &str| WireError::Malformed {
            msg_type,
            reason: reason.to_string(),
        };
        let msg = match msg_type {
            MsgType::Put => {
                let flags = r.u8()?;
                Message::Put(Put {
                    flags,
                    record: get_record(&mut r)?,
                })
            }
            MsgType::PutAck => Message::PutAck { server: r.u32()? },
            MsgType::ReplPut => {
                let origin = r.u32()?;
                let hops_remaining = r.u8()?;
                Message::ReplPut(ReplPut {
                    origin,
                    hops_remaining,
                    record: get_record(&mut r)?,
                })
            }
            MsgType::ReplAck => Message::ReplAck {
                rseq: r.u64()?,
                acker: r.u32()?,
            },
            MsgType::Get => Message::Get(GetReq {
                file_id: r.str()?,
                offset: r.u64()?,
                length: r.u64()?,
                epoch: r.u32()?,
                lane: match r.u8()? {
                    0 => Lane::Ingest,
                    1 => Lane::Staged,
                    _ => return Err(bad("unknown lane")),
                },
            }),
            MsgType::GetResp => {
                let last = r.bool()?;
                let n = r.count(30)?;
                let pieces = (0..n)
                    .map(|_| get_record(&mut r))
                    .collect::<Result<_, _>>()?;
                Message::GetResp(GetResp { last, pieces })
            }
            MsgType::Redirect => Message::Redirect {
                target: get_server(&mut r)?,
                free_bytes: r.u64()?,
            },
            MsgType::MemQuery => Message::MemQuery(get_mem_query(&mut r)?),
            MsgType::MemResp => Message::MemResp(get_mem_query(&mut r)?),
            MsgType::Ping => Message::Ping { from: r.u32()? },
            MsgType::PingAck => Message::PingAck { from: r.u32()? },
            MsgType::NeighborQuery => Message::NeighborQuery(get_neighbor(&mut r)?),
            MsgType::NeighborResp => Message::NeighborResp(get_neighbor(&mut r)?),
            MsgType::FailReport => {
                let subject = get_server(&mut r)?;
                let reporter = match r.u8()? {
                    0 => Reporter::Server(r.u32()?),
                    1 => Reporter::Client(r.u32()?),
                    _ => return Err(bad("unknown reporter kind")),
                };
                Message::FailReport {
                    subject,
                    reporter,
                    version: r.u64()?,
                }
            }
            MsgType::FailConfirmReq => Message::FailConfirmReq {
                subject: get_server(&mut r)?,
            },
            MsgType::FailConfirmResp => Message::FailConfirmResp {
                subject: r.u32()?,
                confirmed: r.bool()?,
            },
            MsgType::JoinReq => Message::JoinReq {
                addr: r.str()?,
                predecessor: r.u32()?,
            },
            MsgType::RingUpdate => Message::RingUpdate(ServerList {
                version: r.u64()?,
                servers: get_servers(&mut r)?,
            }),
            MsgType::Register => {
                let role = Role::from_u8(r.u8()?).ok_or_else(|| bad("unknown role"))?;
                Message::Register(Register {
                    role,
                    rank: r.u32()?,
                    addr: r.str()?,
                })
            }
            MsgType::FlushCmd => Message::FlushCmd(FlushCmd {
                flush_id: r.u64()?,
                epoch: r.u32()?,
                abort: r.bool()?,
                ordering: get_servers(&mut r)?,
            }),
            MsgType::ShuffleMeta => {
                let flush_id = r.u64()?;
                let from = r.u32()?;
                let n = r.count(14)?;
                let files = (0..n)
                    .map(|_| {
                        Ok(FileExtent {
                            file_id: r.str()?,
                            extent: r.u64()?,
                            max_epoch: r.u32()?,
                        })
                    })
                    .collect::<Result<_, WireError>>()?;
                Message::ShuffleMeta(ShuffleMeta {
                    flush_id,
                    from,
                    files,
                })
            }
            MsgType::ShuffleData => match r.u8()? {
                0 => Message::ShuffleData(ShuffleData::Piece {
                    flush_id: r.u64()?,
                    from: r.u32()?,
                    piece: get_record(&mut r)?,
                }),
                1 => Message::ShuffleData(ShuffleData::End {
                    flush_id: r.u64()?,
                    from: r.u32()?,
                    count: r.u64()?,
                }),
                _ => return Err(bad("unknown shuffle frame kind")),
            },
            MsgType::FlushDone => Message::FlushDone(FlushDone {
                flush_id: r.u64()?,
                epoch: r.u32()?,
                from: r.u32()?,
                ok: r.bool()?,
                files: r.u32()?,
                bytes: r.u64()?,
            }),
            MsgType::LookupReq => Message::LookupReq(LookupReq {
                file_id: r.str()?,
                offset: r.u64()?,
                length: r.u64()?,
                epoch: r.u32()?,
            }),
            MsgType::LookupResp => match r.u8()? {
                0 => Message::LookupResp(LookupRoute::Broadcast),
                1 => {
                    let epoch = r.u32()?;
                    let n = r.count(22)?;
                    let owners = (0..n)
                        .map(|_| Ok((get_server(&mut r)?, r.u64()?, r.u64()?)))
                        .collect::<Result<_, WireError>>()?;
                    Message::LookupResp(LookupRoute::Owners { epoch, owners })
                }
                _ => return Err(bad("unknown lookup route")),
            },
            MsgType::Error => {
                let code = ErrorCode::from_u16(r.u16()?).ok_or_else(|| bad("unknown code"))?;
                let request = MsgType::from_code(r.u8()?).ok_or_else(|| bad("unknown request"))?;
                Message::Error(ErrorMsg {
                    code,
                    request,
                    retry_after_ms: r.u32()?,
                    detail: r.str()?,
                })
            }
        };
        r.finish()?;
        Ok(msg)
    }
}
