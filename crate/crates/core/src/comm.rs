//! V2X wire messages, transmission-cost accounting and a bandwidth-capped
//! channel.
//!
//! Layout (little-endian): magic `u32`, version `u16`, sender `u32`,
//! timestamp ms `u64`, kind `u8`, then the body. Query bodies are
//! `u32 count, u32 dim`, `count·dim` f32 features, `count·2` f32 refs and
//! `count` f32 scores. Occupancy bodies are `u32 H, u32 W`, f32 cell size,
//! f32 origin x/y and `H·W` f32 probabilities.
//!
//! Transmission cost counts features and refs (or grid cells) only; headers,
//! shape fields and scores are bookkeeping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{OccupancyGrid, PointSet2D};
use crate::model::{QueryKind, QuerySet};
use crate::numerics::Matrix;

pub const MAGIC: u32 = 0x5632_5846;
pub const VERSION: u16 = 1;
/// Bytes before the body.
pub const HEADER_BYTES: usize = 4 + 2 + 4 + 8 + 1;
/// Default message rate.
pub const DEFAULT_FREQUENCY_HZ: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadKind {
    Track = 0,
    Map = 1,
    Occupancy = 2,
    Motion = 3,
}

impl PayloadKind {
    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => PayloadKind::Track,
            1 => PayloadKind::Map,
            2 => PayloadKind::Occupancy,
            3 => PayloadKind::Motion,
            _ => return Err(Error::Decode(format!("unknown payload kind {b}"))),
        })
    }

    fn of_query(kind: QueryKind) -> Self {
        match kind {
            QueryKind::Track => PayloadKind::Track,
            QueryKind::Map => PayloadKind::Map,
            QueryKind::Motion => PayloadKind::Motion,
        }
    }

    fn query_kind(self) -> Option<QueryKind> {
        match self {
            PayloadKind::Track => Some(QueryKind::Track),
            PayloadKind::Map => Some(QueryKind::Map),
            PayloadKind::Motion => Some(QueryKind::Motion),
            PayloadKind::Occupancy => None,
        }
    }
}

/// Decoded message content.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Queries(QuerySet),
    Occupancy(OccupancyGrid),
}

/// One serialized message. The wire bytes are the source of truth; the
/// header fields are cached for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct V2XMessage {
    pub sender: u32,
    pub timestamp_ms: u64,
    pub kind: PayloadKind,
    bytes: Vec<u8>,
}

fn f32_of(v: f64) -> Result<f32> {
    let x = v as f32;
    if !v.is_finite() || !x.is_finite() {
        return Err(Error::Numeric(format!("value {v} cannot be sent as f32")));
    }
    Ok(x)
}

fn header(sender: u32, timestamp_ms: u64, kind: PayloadKind) -> Vec<u8> {
    let mut b = Vec::with_capacity(HEADER_BYTES);
    b.extend(MAGIC.to_le_bytes());
    b.extend(VERSION.to_le_bytes());
    b.extend(sender.to_le_bytes());
    b.extend(timestamp_ms.to_le_bytes());
    b.push(kind as u8);
    b
}

fn put_f32s(b: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        b.extend(f32_of(v)?.to_le_bytes());
    }
    Ok(())
}

/// Serializes a query set; the sender id is the set's agent.
pub fn encode_queries(qs: &QuerySet, timestamp_ms: u64) -> Result<V2XMessage> {
    let kind = PayloadKind::of_query(qs.kind);
    let mut b = header(qs.agent, timestamp_ms, kind);
    b.extend((qs.len() as u32).to_le_bytes());
    b.extend((qs.dim() as u32).to_le_bytes());
    put_f32s(&mut b, qs.queries.data().iter().copied())?;
    put_f32s(&mut b, qs.refs.points.iter().flat_map(|p| [p[0], p[1]]))?;
    put_f32s(&mut b, qs.scores.iter().copied())?;
    Ok(V2XMessage { sender: qs.agent, timestamp_ms, kind, bytes: b })
}

pub fn encode_occupancy(grid: &OccupancyGrid, sender: u32, timestamp_ms: u64) -> Result<V2XMessage> {
    let mut b = header(sender, timestamp_ms, PayloadKind::Occupancy);
    b.extend((grid.height() as u32).to_le_bytes());
    b.extend((grid.width() as u32).to_le_bytes());
    put_f32s(&mut b, [grid.cell_size(), grid.origin()[0], grid.origin()[1]])?;
    put_f32s(&mut b, grid.probs().iter().copied())?;
    Ok(V2XMessage { sender, timestamp_ms, kind: PayloadKind::Occupancy, bytes: b })
}

pub fn encode(payload: &Payload, sender: u32, timestamp_ms: u64) -> Result<V2XMessage> {
    match payload {
        Payload::Queries(qs) => {
            if qs.agent != sender {
                return Err(Error::Contract(format!("query set of agent {} sent as {sender}", qs.agent)));
            }
            encode_queries(qs, timestamp_ms)
        }
        Payload::Occupancy(g) => encode_occupancy(g, sender, timestamp_ms),
    }
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.at + N;
        let s = self
            .b
            .get(self.at..end)
            .ok_or_else(|| Error::Decode(format!("truncated message at byte {}", self.at)))?;
        self.at = end;
        Ok(s.try_into().expect("slice of length N"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let need = n.checked_mul(4).ok_or_else(|| Error::Decode("length overflow".into()))?;
        if self.b.len() - self.at < need {
            return Err(Error::Decode(format!("payload needs {need} more bytes, {} left", self.b.len() - self.at)));
        }
        (0..n)
            .map(|_| {
                let v = f32::from_le_bytes(self.take()?);
                if v.is_finite() {
                    Ok(v as f64)
                } else {
                    Err(Error::Decode("non-finite float on the wire".into()))
                }
            })
            .collect()
    }
}

impl V2XMessage {
    /// Parses and validates wire bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { b: bytes, at: 0 };
        let magic = r.u32()?;
        if magic != MAGIC {
            return Err(Error::Decode(format!("bad magic {magic:#010x}")));
        }
        let version = u16::from_le_bytes(r.take()?);
        if version != VERSION {
            return Err(Error::Decode(format!("unsupported version {version}")));
        }
        let sender = r.u32()?;
        let timestamp_ms = u64::from_le_bytes(r.take()?);
        let kind = PayloadKind::from_byte(r.take::<1>()?[0])?;
        let msg = V2XMessage { sender, timestamp_ms, kind, bytes: bytes.to_vec() };
        msg.decode()?;
        Ok(msg)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    /// Parses the body.
    pub fn decode(&self) -> Result<Payload> {
        let mut r = Reader { b: &self.bytes, at: HEADER_BYTES };
        if self.bytes.len() < HEADER_BYTES {
            return Err(Error::Decode("message shorter than its header".into()));
        }
        let payload = match self.kind.query_kind() {
            Some(kind) => {
                let count = r.u32()? as usize;
                let dim = r.u32()? as usize;
                let cells = count.checked_mul(dim).ok_or_else(|| Error::Decode("length overflow".into()))?;
                let feats = r.f32s(cells)?;
                let refs = r.f32s(count * 2)?;
                let scores = r.f32s(count)?;
                let queries = Matrix::from_vec(count, dim, feats)?;
                let refs = PointSet2D::new(refs.chunks(2).map(|c| [c[0], c[1]]).collect())?;
                let qs = QuerySet::new(kind, self.sender, queries, refs, scores)
                    .map_err(|e| Error::Decode(e.to_string()))?;
                Payload::Queries(qs)
            }
            None => {
                let h = r.u32()? as usize;
                let w = r.u32()? as usize;
                let geo = r.f32s(3)?;
                let probs = r.f32s(h.checked_mul(w).ok_or_else(|| Error::Decode("length overflow".into()))?)?;
                let g = OccupancyGrid::from_probs(h, w, geo[0], [geo[1], geo[2]], probs)
                    .map_err(|e| Error::Decode(e.to_string()))?;
                Payload::Occupancy(g)
            }
        };
        if r.at != self.bytes.len() {
            return Err(Error::Decode(format!("{} trailing bytes", self.bytes.len() - r.at)));
        }
        Ok(payload)
    }

    fn body_u32(&self, at: usize) -> u32 {
        let s = &self.bytes[HEADER_BYTES + at..HEADER_BYTES + at + 4];
        u32::from_le_bytes(s.try_into().expect("4 bytes"))
    }

    /// Query rows, or grid cells for occupancy.
    pub fn count(&self) -> usize {
        match self.kind {
            PayloadKind::Occupancy => self.body_u32(0) as usize * self.body_u32(4) as usize,
            _ => self.body_u32(0) as usize,
        }
    }

    /// Bytes charged to the channel.
    pub fn payload_bytes(&self) -> usize {
        match self.kind {
            PayloadKind::Occupancy => self.count() * 4,
            _ => self.count() * (self.body_u32(4) as usize + 2) * 4,
        }
    }
}

/// Sum of charged payload bytes per frame times the message rate.
pub fn bps(messages: &[V2XMessage], frequency_hz: f64) -> Result<f64> {
    if !(frequency_hz > 0.0 && frequency_hz.is_finite()) {
        return Err(Error::Contract(format!("frequency {frequency_hz} must be positive")));
    }
    let bytes: usize = messages.iter().map(V2XMessage::payload_bytes).sum();
    Ok(bytes as f64 * frequency_hz)
}

/// Concatenates messages, each preceded by its wire length as a u32.
pub fn write_frames(messages: &[V2XMessage]) -> Vec<u8> {
    let mut out = Vec::new();
    for m in messages {
        out.extend((m.bytes.len() as u32).to_le_bytes());
        out.extend(&m.bytes);
    }
    out
}

/// Inverse of [`write_frames`].
pub fn read_frames(bytes: &[u8]) -> Result<Vec<V2XMessage>> {
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let Some(len) = bytes.get(at..at + 4) else {
            return Err(Error::Decode(format!("truncated frame length at byte {at}")));
        };
        let len = u32::from_le_bytes(len.try_into().expect("4 bytes")) as usize;
        at += 4;
        let Some(body) = bytes.get(at..at + len) else {
            return Err(Error::Decode(format!("frame at byte {} runs past the end", at - 4)));
        };
        out.push(V2XMessage::from_bytes(body)?);
        at += len;
    }
    Ok(out)
}

/// Per-second byte cap of the link. `cap_bps = None` is unlimited.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelBudget {
    pub cap_bps: Option<f64>,
    pub frequency_hz: f64,
}

impl Default for ChannelBudget {
    fn default() -> Self {
        ChannelBudget::unlimited()
    }
}

impl ChannelBudget {
    pub fn new(cap_bps: Option<f64>, frequency_hz: f64) -> Result<Self> {
        let b = ChannelBudget { cap_bps, frequency_hz };
        b.validate()?;
        Ok(b)
    }

    pub fn unlimited() -> Self {
        ChannelBudget { cap_bps: None, frequency_hz: DEFAULT_FREQUENCY_HZ }
    }

    pub fn capped(cap_bps: f64) -> Result<Self> {
        Self::new(Some(cap_bps), DEFAULT_FREQUENCY_HZ)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_hz > 0.0 && self.frequency_hz.is_finite()) {
            return Err(Error::Config(format!("frequency {} must be positive", self.frequency_hz)));
        }
        if let Some(c) = self.cap_bps {
            if !(c >= 0.0) || c.is_nan() {
                return Err(Error::Config(format!("bandwidth cap {c} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// Fits `messages` into the budget.
///
/// Occupancy grids are served first, whole or not at all. Remaining query
/// messages follow in list order: track sets keep their highest-scoring rows
/// (stable by index, original order preserved) while they fit; map and
/// motion sets are sent whole or emptied, since their receivers need the
/// complete row structure. Dropped content leaves an empty message of the
/// same kind, so the message list keeps its shape.
pub fn constrain(messages: &[V2XMessage], budget: &ChannelBudget) -> Result<Vec<V2XMessage>> {
    budget.validate()?;
    let Some(cap) = budget.cap_bps else {
        return Ok(messages.to_vec());
    };
    let fits = |bytes: usize| bytes as f64 * budget.frequency_hz <= cap;
    let mut used = 0usize;
    let mut out: Vec<Option<V2XMessage>> = vec![None; messages.len()];

    let (occ, queries): (Vec<usize>, Vec<usize>) =
        (0..messages.len()).partition(|&i| messages[i].kind == PayloadKind::Occupancy);
    for i in occ {
        let m = &messages[i];
        let cost = m.payload_bytes();
        out[i] = Some(if fits(used + cost) {
            used += cost;
            m.clone()
        } else {
            let Payload::Occupancy(g) = m.decode()? else { unreachable!() };
            let empty = OccupancyGrid::from_probs(0, 0, g.cell_size(), g.origin(), vec![])?;
            encode_occupancy(&empty, m.sender, m.timestamp_ms)?
        });
    }
    for i in queries {
        let m = &messages[i];
        let Payload::Queries(qs) = m.decode()? else { unreachable!() };
        let row = (qs.dim() + 2) * 4;
        let keep: Vec<usize> = if m.kind == PayloadKind::Track {
            let mut kept = Vec::new();
            for r in qs.top_by_score(qs.len()) {
                if fits(used + row) {
                    used += row;
                    kept.push(r);
                }
            }
            kept.sort_unstable();
            kept
        } else if fits(used + m.payload_bytes()) {
            used += m.payload_bytes();
            (0..qs.len()).collect()
        } else {
            Vec::new()
        };
        out[i] = Some(if keep.len() == qs.len() {
            m.clone()
        } else {
            encode_queries(&qs.select(&keep)?, m.timestamp_ms)?
        });
    }
    Ok(out.into_iter().map(|m| m.expect("every slot filled")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn queries(rng: &mut ChaCha8Rng, kind: QueryKind, n: usize, d: usize) -> QuerySet {
        let q = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let refs = PointSet2D::new((0..n).map(|_| [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)]).collect())
            .unwrap();
        QuerySet::new(kind, 1, q, refs, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    fn ulp_close(a: f64, b: f64) -> bool {
        let x = a as f32;
        let ulp = (f32::from_bits(x.abs().to_bits() + 1) - x.abs()) as f64;
        (a - b).abs() <= ulp
    }

    #[test]
    fn frames_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let msgs = vec![
            encode_queries(&queries(&mut rng, QueryKind::Track, 3, 4), 1).unwrap(),
            encode_queries(&queries(&mut rng, QueryKind::Map, 0, 4), 1).unwrap(),
            encode_queries(&queries(&mut rng, QueryKind::Motion, 2, 4), 1).unwrap(),
        ];
        let bytes = write_frames(&msgs);
        assert_eq!(read_frames(&bytes).unwrap(), msgs);
        assert!(read_frames(&[]).unwrap().is_empty());
        assert!(read_frames(&bytes[..bytes.len() - 1]).is_err());
        assert!(read_frames(&bytes[..2]).is_err());
    }

    #[test]
    fn layout_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let qs = queries(&mut rng, QueryKind::Track, 5, 8);
        let m = encode_queries(&qs, 1234).unwrap();
        assert_eq!(m.payload_bytes(), 5 * 8 * 4 + 5 * 2 * 4);
        assert_eq!(m.bytes().len(), HEADER_BYTES + 8 + 5 * 8 * 4 + 5 * 2 * 4 + 5 * 4);
        assert_eq!(&m.bytes()[..4], &[0x46, 0x58, 0x32, 0x56]);
        assert_eq!(&m.bytes()[4..6], &[1, 0]);
        assert_eq!(&m.bytes()[6..10], &[1, 0, 0, 0]);
        assert_eq!(&m.bytes()[10..18], &1234u64.to_le_bytes());
        assert_eq!(m.bytes()[18], 0);
        assert_eq!(&m.bytes()[19..23], &5u32.to_le_bytes());
        assert_eq!(&m.bytes()[27..31], &(qs.queries.get(0, 0) as f32).to_le_bytes());

        let grid = OccupancyGrid::from_probs(2, 3, 0.5, [1.0, -2.0], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
        let m = encode_occupancy(&grid, 9, 5).unwrap();
        assert_eq!(m.bytes().len(), HEADER_BYTES + 8 + 12 + 24);
        assert_eq!(m.payload_bytes(), 24);
        assert_eq!(m.bytes()[18], 2);
    }

    #[test]
    fn round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [QueryKind::Track, QueryKind::Map, QueryKind::Motion] {
            let qs = queries(&mut rng, kind, 7, 6);
            let m = encode_queries(&qs, 42).unwrap();
            let back = V2XMessage::from_bytes(m.bytes()).unwrap();
            assert_eq!(back, m);
            let Payload::Queries(d) = back.decode().unwrap() else { panic!() };
            assert_eq!((d.kind, d.agent, d.len(), d.dim()), (kind, 1, 7, 6));
            for (a, b) in qs.queries.data().iter().zip(d.queries.data()) {
                assert!(ulp_close(*a, *b));
            }
            for (a, b) in qs.refs.points.iter().flatten().zip(d.refs.points.iter().flatten()) {
                assert!(ulp_close(*a, *b));
            }
            // decoding is a fixed point after one pass
            let again = encode_queries(&d, 42).unwrap();
            assert_eq!(again.bytes(), m.bytes());
        }
        let empty = QuerySet::empty(QueryKind::Track, 3, 8);
        let m = encode_queries(&empty, 0).unwrap();
        assert_eq!(m.payload_bytes(), 0);
        assert_eq!(m.decode().unwrap(), Payload::Queries(empty));
    }

    #[test]
    fn corrupt_messages_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = encode_queries(&queries(&mut rng, QueryKind::Map, 3, 4), 0).unwrap();
        let mut b = m.bytes().to_vec();
        b[0] ^= 1;
        assert!(matches!(V2XMessage::from_bytes(&b), Err(Error::Decode(_))));
        let mut b = m.bytes().to_vec();
        b[4] = 2;
        assert!(matches!(V2XMessage::from_bytes(&b), Err(Error::Decode(_))));
        let b = &m.bytes()[..m.bytes().len() - 1];
        assert!(matches!(V2XMessage::from_bytes(b), Err(Error::Decode(_))));
        let mut b = m.bytes().to_vec();
        b.push(0);
        assert!(matches!(V2XMessage::from_bytes(&b), Err(Error::Decode(_))));
        let mut b = m.bytes().to_vec();
        b[18] = 9;
        assert!(matches!(V2XMessage::from_bytes(&b), Err(Error::Decode(_))));
        let mut qs = queries(&mut rng, QueryKind::Map, 1, 2);
        qs.queries.set(0, 0, 1e300);
        assert!(matches!(encode_queries(&qs, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn bps_examples() {
        assert_eq!(bps(&[], 2.0).unwrap(), 0.0);
        let big = QuerySet::empty(QueryKind::Track, 1, 256);
        let big = QuerySet { queries: Matrix::zeros(1500, 256), refs: PointSet2D::new(vec![[0.0; 2]; 1500]).unwrap(), scores: vec![0.5; 1500], ..big };
        let m = encode_queries(&big, 0).unwrap();
        assert_eq!(bps(&[m.clone()], 2.0).unwrap(), 3_096_000.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let motion = encode_queries(&queries(&mut rng, QueryKind::Motion, 30, 256), 0).unwrap();
        let with = bps(&[m.clone(), motion.clone()], 2.0).unwrap();
        assert_eq!(with - 3_096_000.0, motion.payload_bytes() as f64 * 2.0);
        assert!(with > 3_096_000.0);
        assert!(bps(&[m], 0.0).is_err());
    }

    #[test]
    fn constrain_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qs = queries(&mut rng, QueryKind::Track, 10, 6);
        let msgs = vec![encode_queries(&qs, 0).unwrap()];
        assert_eq!(constrain(&msgs, &ChannelBudget::unlimited()).unwrap(), msgs);

        // four rows of (6 + 2)·4 bytes at 2 Hz
        let out = constrain(&msgs, &ChannelBudget::capped(4.0 * 32.0 * 2.0).unwrap()).unwrap();
        let Payload::Queries(kept) = out[0].decode().unwrap() else { panic!() };
        let mut top = qs.top_by_score(4);
        top.sort_unstable();
        let Payload::Queries(orig) = msgs[0].decode().unwrap() else { panic!() };
        assert_eq!(kept, orig.select(&top).unwrap());
        assert_eq!(bps(&out, 2.0).unwrap(), 256.0);

        let grid = OccupancyGrid::from_probs(2, 2, 1.0, [0.0, 0.0], vec![0.5; 4]).unwrap();
        let mut all = msgs.clone();
        all.push(encode_occupancy(&grid, 1, 0).unwrap());
        all.push(encode_queries(&queries(&mut rng, QueryKind::Map, 3, 6), 0).unwrap());
        let zero = constrain(&all, &ChannelBudget::capped(0.0).unwrap()).unwrap();
        assert_eq!(zero.len(), 3);
        assert!(zero.iter().all(|m| m.payload_bytes() == 0));
        assert_eq!(zero.iter().map(|m| m.kind).collect::<Vec<_>>(), all.iter().map(|m| m.kind).collect::<Vec<_>>());
    }

    #[test]
    fn occupancy_first_map_whole() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = OccupancyGrid::from_probs(2, 2, 1.0, [0.0, 0.0], vec![0.5; 4]).unwrap();
        let map = queries(&mut rng, QueryKind::Map, 3, 6);
        let msgs = vec![encode_queries(&map, 0).unwrap(), encode_occupancy(&grid, 1, 0).unwrap()];
        // room for the grid (16 B) and two map rows (64 B), not all three
        let out = constrain(&msgs, &ChannelBudget::capped((16.0 + 64.0) * 2.0).unwrap()).unwrap();
        assert_eq!(out[1], msgs[1]);
        assert_eq!(out[0].payload_bytes(), 0);
        let out = constrain(&msgs, &ChannelBudget::capped((16.0 + 96.0) * 2.0).unwrap()).unwrap();
        assert_eq!(out, msgs);
    }

    proptest! {
        #[test]
        fn constrain_respects_cap(seed in 0u64..500, cap in 0.0..4000.0f64, n in 0usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = OccupancyGrid::from_probs(3, 3, 1.0, [0.0, 0.0], vec![0.2; 9]).unwrap();
            let msgs = vec![
                encode_queries(&queries(&mut rng, QueryKind::Track, n, 4), 0).unwrap(),
                encode_occupancy(&grid, 1, 0).unwrap(),
                encode_queries(&queries(&mut rng, QueryKind::Map, 3, 4), 0).unwrap(),
                encode_queries(&queries(&mut rng, QueryKind::Motion, n, 4), 0).unwrap(),
            ];
            let budget = ChannelBudget::capped(cap).unwrap();
            let out = constrain(&msgs, &budget).unwrap();
            prop_assert!(bps(&out, 2.0).unwrap() <= cap);
            // more budget never sends less
            let more = constrain(&msgs, &ChannelBudget::capped(cap + 100.0).unwrap()).unwrap();
            prop_assert!(bps(&more, 2.0).unwrap() >= bps(&out, 2.0).unwrap());
            // additivity
            let total = bps(&msgs, 2.0).unwrap();
            let parts: f64 = msgs.iter().map(|m| bps(std::slice::from_ref(m), 2.0).unwrap()).sum();
            prop_assert_eq!(total, parts);
        }
    }
}
