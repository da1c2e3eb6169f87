//! Bit-exact model serialization.
//!
//! Two modes share one container: lie-packed files store only the packed
//! triangular parameter values (the small training artifact), dense-cached
//! files store the exponentiated, truncated, oriented weights (the fast
//! inference artifact). All integers and floats are little-endian regardless
//! of host.
//!
//! Layout:
//!   magic "ULIE" | version u16 | mode u8 | record count u32 |
//!   per record: c_out, c_in, d_H, d_W, kind, stride, pad (u32 each) |
//!               payload byte length u64 | payload (f64 LE values)
//!
//! Record kinds: 0 = conv layer under the fan-in/fan-out mapping, 2 = dense
//! classifier head (payload is the row-major weight followed by the bias).

use std::path::Path;

use crate::error::{Error, Result};
use crate::lie::{ExpmConfig, LieParams};
use crate::matrix::Matrix;
use crate::model::{ConvLayer, ConvShape, ConvWeights, DenseHead, Model, NormScheme};
use crate::weight::build_weight;

pub const MAGIC: [u8; 4] = *b"ULIE";
pub const VERSION: u16 = 1;

const KIND_CONV: u32 = 0;
const KIND_HEAD: u32 = 2;

/// On-disk representation of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreMode {
    /// Packed Lie parameters; the model stays trainable after loading.
    LiePacked,
    /// Cached dense unitary weights; inference-only, no exponentials at load
    /// or run time.
    DenseCached,
}

impl StoreMode {
    fn byte(self) -> u8 {
        match self {
            StoreMode::LiePacked => 0,
            StoreMode::DenseCached => 1,
        }
    }
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn record_header(out: &mut Vec<u8>, shape: &ConvShape, kind: u32) {
    for v in [
        shape.c_out as u32,
        shape.c_in as u32,
        shape.d_h as u32,
        shape.d_w as u32,
        kind,
        shape.stride as u32,
        shape.pad as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model. Lie-packed mode requires every layer to still hold
/// its parameters; dense-cached mode exponentiates on the way out.
pub fn to_bytes(model: &Model, mode: StoreMode) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(mode.byte());
    let record_count = model.layers.len() + usize::from(model.head.is_some());
    out.extend_from_slice(&(record_count as u32).to_le_bytes());

    for layer in &model.layers {
        record_header(&mut out, &layer.shape, KIND_CONV);
        let payload: Vec<f64> = match (&layer.weights, mode) {
            (ConvWeights::Lie(lp), StoreMode::LiePacked) => lp.values().to_vec(),
            (ConvWeights::Lie(lp), StoreMode::DenseCached) => {
                let spec = layer.shape.filter_spec()?;
                build_weight(lp, &spec, &model.expm_cfg)?.matrix().data().to_vec()
            }
            (ConvWeights::Cached(w), StoreMode::DenseCached) => w.data().to_vec(),
            (ConvWeights::Cached(_), StoreMode::LiePacked) => {
                return Err(Error::InvalidArgument(
                    "cached weights no longer carry Lie parameters; save in dense mode".into(),
                ))
            }
            (ConvWeights::Free(_), _) => {
                return Err(Error::InvalidArgument(
                    "free-weight baseline models have no on-disk format".into(),
                ))
            }
        };
        out.extend_from_slice(&((payload.len() * 8) as u64).to_le_bytes());
        push_f64s(&mut out, &payload);
    }

    if let Some(head) = &model.head {
        let shape = ConvShape {
            c_in: head.w.rows(),
            c_out: head.w.cols(),
            d_h: 1,
            d_w: 1,
            stride: 1,
            pad: 0,
        };
        record_header(&mut out, &shape, KIND_HEAD);
        let mut payload = head.w.data().to_vec();
        payload.extend_from_slice(head.b.data());
        out.extend_from_slice(&((payload.len() * 8) as u64).to_le_bytes());
        push_f64s(&mut out, &payload);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, context: &'static str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated { context });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, context: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, context)?.try_into().unwrap()))
    }

    fn u32(&mut self, context: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, context)?.try_into().unwrap()))
    }

    fn u64(&mut self, context: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, context)?.try_into().unwrap()))
    }

    fn f64s(&mut self, count: usize, context: &'static str) -> Result<Vec<f64>> {
        let raw = self.take(count * 8, context)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Parses a model file. Mode 0 files come back trainable; mode 1 files come
/// back inference-only with every weight already materialized.
pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic.try_into().unwrap() });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
    }
    let mode = match r.take(1, "mode")?[0] {
        0 => StoreMode::LiePacked,
        1 => StoreMode::DenseCached,
        other => {
            return Err(Error::MalformedFile { context: format!("unknown mode byte {other}") })
        }
    };
    let count = r.u32("record count")? as usize;

    let mut layers = Vec::new();
    let mut head: Option<DenseHead> = None;
    for record in 0..count {
        let c_out = r.u32("record header")? as usize;
        let c_in = r.u32("record header")? as usize;
        let d_h = r.u32("record header")? as usize;
        let d_w = r.u32("record header")? as usize;
        let kind = r.u32("record header")?;
        let stride = r.u32("record header")? as usize;
        let pad = r.u32("record header")? as usize;
        let payload_bytes = r.u64("payload length")? as usize;
        if payload_bytes % 8 != 0 {
            return Err(Error::MalformedFile {
                context: format!("record {record}: payload length {payload_bytes} not 8-aligned"),
            });
        }
        let values = r.f64s(payload_bytes / 8, "payload")?;
        match kind {
            KIND_CONV => {
                if head.is_some() {
                    return Err(Error::MalformedFile {
                        context: format!("record {record}: conv layer after the head record"),
                    });
                }
                let shape = ConvShape { c_in, c_out, d_h, d_w, stride, pad };
                let spec = shape.filter_spec()?;
                let (lie_m, lie_k) = spec.lie_shape();
                let (m, k) = spec.weight_shape();
                let weights = match mode {
                    StoreMode::LiePacked => {
                        let expect = crate::lie::packed_len(lie_m, lie_k);
                        if values.len() != expect {
                            return Err(Error::MalformedFile {
                                context: format!(
                                    "record {record}: {} packed values, expected {expect}",
                                    values.len()
                                ),
                            });
                        }
                        ConvWeights::Lie(LieParams::from_values(lie_m, lie_k, values)?)
                    }
                    StoreMode::DenseCached => {
                        if values.len() != m * k {
                            return Err(Error::MalformedFile {
                                context: format!(
                                    "record {record}: {} dense values, expected {}",
                                    values.len(),
                                    m * k
                                ),
                            });
                        }
                        ConvWeights::Cached(Matrix::from_vec(m, k, values)?)
                    }
                };
                layers.push(ConvLayer { shape, weights });
            }
            KIND_HEAD => {
                if head.is_some() {
                    return Err(Error::MalformedFile {
                        context: format!("record {record}: second head record"),
                    });
                }
                if values.len() != (c_in + 1) * c_out {
                    return Err(Error::MalformedFile {
                        context: format!(
                            "record {record}: head payload has {} values, expected {}",
                            values.len(),
                            (c_in + 1) * c_out
                        ),
                    });
                }
                let (w_vals, b_vals) = values.split_at(c_in * c_out);
                head = Some(DenseHead {
                    w: Matrix::from_vec(c_in, c_out, w_vals.to_vec())?,
                    b: Matrix::from_vec(1, c_out, b_vals.to_vec())?,
                });
            }
            other => {
                return Err(Error::MalformedFile {
                    context: format!("record {record}: unknown record kind {other}"),
                })
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::MalformedFile {
            context: format!("{} trailing bytes after the last record", bytes.len() - r.pos),
        });
    }
    // channel chaining must be consistent
    for pair in layers.windows(2) {
        if pair[1].shape.c_in != pair[0].shape.c_out {
            return Err(Error::MalformedFile {
                context: format!(
                    "layer expects {} input channels but the previous layer emits {}",
                    pair[1].shape.c_in, pair[0].shape.c_out
                ),
            });
        }
    }
    if let (Some(h), Some(last)) = (&head, layers.last()) {
        if h.w.rows() != last.shape.c_out {
            return Err(Error::MalformedFile {
                context: format!(
                    "head expects {} inputs but the last layer emits {}",
                    h.w.rows(),
                    last.shape.c_out
                ),
            });
        }
    }
    let classes = head.as_ref().map(|h| h.w.cols()).unwrap_or(0);
    Ok(Model {
        layers,
        head,
        norm: NormScheme::UnitaryRows,
        expm_cfg: ExpmConfig::default(),
        classes,
    })
}

/// Writes a model file.
pub fn save_file(model: &Model, mode: StoreMode, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, mode)?;
    std::fs::write(path, bytes).map_err(|source| Error::Io { path: path.to_path_buf(), source })
}

/// Reads a model file.
pub fn load_file(path: &Path) -> Result<Model> {
    let bytes =
        std::fs::read(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    from_bytes(&bytes)
}

/// Exponentiates every layer once and freezes the result; subsequent
/// inference performs no exponentials.
pub fn cache_weights(model: &Model) -> Result<Model> {
    model.cache_weights()
}
