//! `.dlic` container: fixed little-endian header, raw gate bits, a
//! range-coded model stream (quantized layer updates) and a range-coded
//! content stream (quantized latents).
//!
//! ```text
//! magic "DLIC" | version u8 | flags u8 | variant u8
//! | height u32 | width u32 | codec fingerprint u64 | λ f64
//! | K u8 | gate bits ⌈K/8⌉ bytes, MSB first
//! | w f64 | μ f64 | s f64 | max_index u16
//! | per open layer: rank u8 | c_out u16 | c_in u16 | k_h u8 | k_w u8
//! | [cluster id u8, when flags & 1]
//! | model length u32 | content length u32 | model stream | content stream
//! ```

use crate::adapters::{count_params, AdapterKind, LayerShape, LayerUpdate};
use crate::codec::{CodecModel, LatentCode, ADAPTABLE_LAYERS, LATENT_MAX, LATENT_MIN};
use crate::delta_prior::{delta_symbol_table, DeltaPriorConfig, QuantizedDelta};
use crate::error::{Error, Result};
use crate::gate::GateVector;
use crate::image::ImageTensor;
use crate::scalar::Scalar;
use crate::wire::Reader;

use super::range_coder::{range_decode, range_encode, RangeDecoder, RangeEncoder};

pub const MAGIC: &[u8; 4] = b"DLIC";
pub const FORMAT_VERSION: u8 = 1;
const FLAG_CLUSTER: u8 = 1;

/// Shape and rank of one transmitted layer update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerRecord {
    pub layer_index: usize,
    pub shape: LayerShape,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobHeader {
    pub version: u8,
    pub variant: AdapterKind,
    /// Image size before padding.
    pub height: usize,
    pub width: usize,
    pub codec_fingerprint: u64,
    pub lambda: f64,
    pub gates: GateVector,
    pub prior: DeltaPriorConfig,
    /// One record per open gate, in layer order.
    pub layers: Vec<LayerRecord>,
    /// One-step bank cluster the update came from.
    pub cluster: Option<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressedBlob {
    pub header: BlobHeader,
    pub model_stream: Vec<u8>,
    pub content_stream: Vec<u8>,
}

impl BlobHeader {
    fn write(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.push(if self.cluster.is_some() { FLAG_CLUSTER } else { 0 });
        out.push(self.variant.code());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.codec_fingerprint.to_le_bytes());
        out.extend_from_slice(&self.lambda.to_le_bytes());
        out.push(self.gates.len() as u8);
        out.extend_from_slice(&self.gates.pack());
        out.extend_from_slice(&self.prior.w.to_le_bytes());
        out.extend_from_slice(&self.prior.mu.to_le_bytes());
        out.extend_from_slice(&self.prior.s.to_le_bytes());
        out.extend_from_slice(&(self.prior.max_index as u16).to_le_bytes());
        for l in &self.layers {
            out.push(l.rank as u8);
            out.extend_from_slice(&(l.shape.c_out as u16).to_le_bytes());
            out.extend_from_slice(&(l.shape.c_in as u16).to_le_bytes());
            out.push(l.shape.kh as u8);
            out.push(l.shape.kw as u8);
        }
        if let Some(c) = self.cluster {
            out.push(c);
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self> {
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("not a .dlic stream (bad magic)".into()));
        }
        let version = r.u8("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Incompatible(format!(
                "stream version {version}, decoder supports {FORMAT_VERSION}"
            )));
        }
        let flags = r.u8("flags")?;
        if flags & !FLAG_CLUSTER != 0 {
            return Err(r.corrupt(format!("unknown flags {flags:#04x}")));
        }
        let variant = AdapterKind::from_code(r.u8("variant")?)?;
        let height = r.u32("height")? as usize;
        let width = r.u32("width")? as usize;
        if height == 0 || width == 0 {
            return Err(r.corrupt("zero image dimension"));
        }
        let codec_fingerprint = r.u64("codec fingerprint")?;
        let lambda = r.f64("lambda")?;
        let k = r.u8("gate count")? as usize;
        let gates = GateVector::unpack(r.take(k.div_ceil(8), "gate bits")?, k)?;
        let prior = DeltaPriorConfig {
            w: r.f64("prior w")?,
            mu: r.f64("prior mu")?,
            s: r.f64("prior s")?,
            max_index: r.u16("prior max index")? as i32,
        };
        prior.validate()?;
        let mut layers = Vec::with_capacity(gates.open_count());
        for (layer_index, _) in gates.bits.iter().enumerate().filter(|(_, &b)| b) {
            let rank = r.u8("rank")? as usize;
            let c_out = r.u16("c_out")? as usize;
            let c_in = r.u16("c_in")? as usize;
            let kh = r.u8("k_h")? as usize;
            let kw = r.u8("k_w")? as usize;
            layers.push(LayerRecord {
                layer_index,
                shape: LayerShape::new(c_out, c_in, kh, kw),
                rank,
            });
        }
        let cluster = if flags & FLAG_CLUSTER != 0 {
            Some(r.u8("cluster id")?)
        } else {
            None
        };
        Ok(Self {
            version,
            variant,
            height,
            width,
            codec_fingerprint,
            lambda,
            gates,
            prior,
            layers,
            cluster,
        })
    }
}

impl CompressedBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.model_stream.len() + self.content_stream.len());
        self.header.write(&mut out);
        out.extend_from_slice(&(self.model_stream.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.content_stream.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.model_stream);
        out.extend_from_slice(&self.content_stream);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let header = BlobHeader::read(&mut r)?;
        let model_len = r.u32("model stream length")? as usize;
        let content_len = r.u32("content stream length")? as usize;
        let model_stream = r.take(model_len, "model stream")?.to_vec();
        let content_stream = r.take(content_len, "content stream")?.to_vec();
        r.finish("content stream")?;
        if header.layers.is_empty() != model_stream.is_empty() {
            return Err(Error::Corrupt {
                offset: bytes.len() - content_len - model_len,
                detail: "model stream does not match the gate bits".into(),
            });
        }
        Ok(Self {
            header,
            model_stream,
            content_stream,
        })
    }

    /// Header bytes including the two stream-length fields.
    pub fn header_len(&self) -> usize {
        let mut h = Vec::new();
        self.header.write(&mut h);
        h.len() + 8
    }

    pub fn total_bytes(&self) -> usize {
        self.header_len() + self.model_stream.len() + self.content_stream.len()
    }

    pub fn total_bits(&self) -> u64 {
        8 * self.total_bytes() as u64
    }

    /// Bits per pixel of the unpadded image.
    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / (self.header.height * self.header.width) as f64
    }
}

/// Everything needed to pack one image.
#[derive(Clone, Debug)]
pub struct PackRequest<'a, T> {
    pub latent: &'a LatentCode<T>,
    /// One slot per adaptable layer; present exactly for open gates.
    pub deltas: &'a [Option<QuantizedDelta>],
    pub gates: &'a GateVector,
    pub variant: AdapterKind,
    pub rank: usize,
    pub prior: DeltaPriorConfig,
    pub height: usize,
    pub width: usize,
    pub cluster: Option<u8>,
}

fn latent_dims<T: Scalar>(model: &CodecModel<T>, height: usize, width: usize) -> (usize, usize) {
    let s = model.downsampling();
    (height.div_ceil(s), width.div_ceil(s))
}

/// Range-codes `ŷ` channel by channel with the model's latent prior.
pub fn encode_content<T: Scalar>(model: &CodecModel<T>, latent: &LatentCode<T>) -> Result<Vec<u8>> {
    let q = latent
        .quantized
        .as_ref()
        .ok_or_else(|| Error::Contract("latent must be quantized".into()))?;
    if latent.values.channels != model.config.latent_channels {
        return Err(Error::Shape(format!(
            "latent has {} channels, model expects {}",
            latent.values.channels, model.config.latent_channels
        )));
    }
    let plane = latent.values.plane();
    if plane == 0 {
        return Ok(Vec::new());
    }
    let mut enc = RangeEncoder::new();
    for c in 0..latent.values.channels {
        let table = model.prior.symbol_table(c);
        for &v in &q[c * plane..(c + 1) * plane] {
            if !(LATENT_MIN..=LATENT_MAX).contains(&v) {
                return Err(Error::Range {
                    index: v as i64,
                    max: LATENT_MAX as i64,
                });
            }
            enc.encode((v - LATENT_MIN) as usize, &table);
        }
    }
    Ok(enc.finish())
}

pub fn decode_content<T: Scalar>(
    model: &CodecModel<T>,
    bytes: &[u8],
    height: usize,
    width: usize,
) -> Result<LatentCode<T>> {
    let channels = model.config.latent_channels;
    let plane = height * width;
    if plane == 0 {
        return Ok(LatentCode::from_symbols(channels, height, width, Vec::new()));
    }
    let mut dec = RangeDecoder::new(bytes)?;
    let mut symbols = Vec::with_capacity(channels * plane);
    for c in 0..channels {
        let table = model.prior.symbol_table(c);
        for _ in 0..plane {
            symbols.push(dec.decode(&table)? as i32 + LATENT_MIN);
        }
    }
    if !dec.is_exhausted() {
        return Err(Error::Corrupt {
            offset: dec.position(),
            detail: "trailing bytes after the last latent".into(),
        });
    }
    Ok(LatentCode::from_symbols(channels, height, width, symbols))
}

/// Range-codes the concatenated indices of `deltas` with the delta prior.
pub fn encode_model(deltas: &[&QuantizedDelta], prior: &DeltaPriorConfig) -> Result<Vec<u8>> {
    prior.validate()?;
    let table = delta_symbol_table(prior);
    let mut symbols = Vec::new();
    for d in deltas {
        if d.config != *prior {
            return Err(Error::Contract("delta quantized with a different prior".into()));
        }
        for &i in &d.indices {
            if i.abs() > prior.max_index {
                return Err(Error::Range {
                    index: i as i64,
                    max: prior.max_index as i64,
                });
            }
            symbols.push((i + prior.max_index) as usize);
        }
    }
    range_encode(&symbols, &table)
}

pub fn decode_model(bytes: &[u8], lengths: &[usize], prior: &DeltaPriorConfig) -> Result<Vec<QuantizedDelta>> {
    let table = delta_symbol_table(prior);
    let total: usize = lengths.iter().sum();
    let symbols = range_decode(bytes, total, &table)?;
    let mut out = Vec::with_capacity(lengths.len());
    let mut at = 0;
    for &n in lengths {
        out.push(QuantizedDelta {
            indices: symbols[at..at + n].iter().map(|&s| s as i32 - prior.max_index).collect(),
            config: *prior,
        });
        at += n;
    }
    Ok(out)
}

/// Dequantized, ready-to-apply updates for every adaptable layer.
pub fn updates_from_quantized<T: Scalar>(
    model: &CodecModel<T>,
    variant: AdapterKind,
    rank: usize,
    deltas: &[Option<QuantizedDelta>],
) -> Result<Vec<Option<LayerUpdate<T>>>> {
    if deltas.len() != ADAPTABLE_LAYERS {
        return Err(Error::Contract(format!(
            "expected {ADAPTABLE_LAYERS} delta slots, got {}",
            deltas.len()
        )));
    }
    deltas
        .iter()
        .enumerate()
        .map(|(k, d)| {
            d.as_ref()
                .map(|q| {
                    let layer = &model.synthesis[k];
                    let fresh = LayerUpdate::new(variant, layer.shape, rank, k, 0, Some(&layer.weight))?;
                    if q.len() != fresh.param_count() {
                        return Err(Error::Shape(format!(
                            "layer {k}: {} delta values, {} expected",
                            q.len(),
                            fresh.param_count()
                        )));
                    }
                    Ok(fresh.with_params(q.dequantize()))
                })
                .transpose()
        })
        .collect()
}

pub fn pack<T: Scalar>(model: &CodecModel<T>, req: &PackRequest<'_, T>) -> Result<CompressedBlob> {
    if req.gates.len() != ADAPTABLE_LAYERS || req.deltas.len() != ADAPTABLE_LAYERS {
        return Err(Error::Contract(format!(
            "gates ({}) and deltas ({}) must both have length {ADAPTABLE_LAYERS}",
            req.gates.len(),
            req.deltas.len()
        )));
    }
    let (lh, lw) = latent_dims(model, req.height, req.width);
    if req.height == 0 || req.width == 0 || (req.latent.values.height, req.latent.values.width) != (lh, lw) {
        return Err(Error::Shape(format!(
            "latent {}x{} does not match a {}x{} image",
            req.latent.values.height, req.latent.values.width, req.height, req.width
        )));
    }
    let mut layers = Vec::new();
    let mut open = Vec::new();
    for (k, (d, &g)) in req.deltas.iter().zip(&req.gates.bits).enumerate() {
        match (d, g) {
            (Some(q), true) => {
                let shape = model.layer_shape(k);
                let expected = count_params(req.variant, shape, req.rank);
                if q.len() != expected {
                    return Err(Error::Shape(format!("layer {k}: {} delta values, {expected} expected", q.len())));
                }
                layers.push(LayerRecord {
                    layer_index: k,
                    shape,
                    rank: if req.variant.uses_rank() { req.rank } else { 0 },
                });
                open.push(q);
            }
            (None, false) => {}
            (Some(_), false) => return Err(Error::Contract(format!("delta for closed layer {k}"))),
            (None, true) => return Err(Error::Contract(format!("open layer {k} has no delta"))),
        }
    }
    let model_stream = encode_model(&open, &req.prior)?;
    let content_stream = encode_content(model, req.latent)?;
    Ok(CompressedBlob {
        header: BlobHeader {
            version: FORMAT_VERSION,
            variant: req.variant,
            height: req.height,
            width: req.width,
            codec_fingerprint: model.fingerprint(),
            lambda: model.lambda,
            gates: GateVector::from_bits(req.gates.bits.clone()),
            prior: req.prior,
            layers,
            cluster: req.cluster,
        },
        model_stream,
        content_stream,
    })
}

/// Decoded payload of a blob, before synthesis.
#[derive(Clone, Debug)]
pub struct DecodedParts<T> {
    pub latent: LatentCode<T>,
    pub deltas: Vec<Option<QuantizedDelta>>,
    pub updates: Vec<Option<LayerUpdate<T>>>,
    pub gates: GateVector,
}

pub fn unpack_parts<T: Scalar>(blob: &CompressedBlob, model: &CodecModel<T>) -> Result<DecodedParts<T>> {
    let h = &blob.header;
    let fp = model.fingerprint();
    if h.codec_fingerprint != fp {
        return Err(Error::Incompatible(format!(
            "stream was encoded for codec {:016x}, decoder has {fp:016x}",
            h.codec_fingerprint
        )));
    }
    if h.gates.len() != ADAPTABLE_LAYERS {
        return Err(Error::Incompatible(format!(
            "stream has {} gates, codec has {ADAPTABLE_LAYERS} adaptable layers",
            h.gates.len()
        )));
    }
    let mut lengths = Vec::with_capacity(h.layers.len());
    for rec in &h.layers {
        if rec.shape != model.layer_shape(rec.layer_index) {
            return Err(Error::Incompatible(format!("layer {} shape differs from the codec", rec.layer_index)));
        }
        lengths.push(count_params(h.variant, rec.shape, rec.rank));
    }
    let decoded = decode_model(&blob.model_stream, &lengths, &h.prior)?;
    let mut deltas = vec![None; ADAPTABLE_LAYERS];
    for (rec, q) in h.layers.iter().zip(decoded) {
        deltas[rec.layer_index] = Some(q);
    }
    let rank = h.layers.iter().map(|l| l.rank).max().unwrap_or(0);
    if h.layers.iter().any(|l| l.rank != rank) {
        return Err(Error::Format("mixed ranks across layers are not supported".into()));
    }
    let updates = updates_from_quantized(model, h.variant, rank, &deltas)?;
    let (lh, lw) = latent_dims(model, h.height, h.width);
    let latent = decode_content(model, &blob.content_stream, lh, lw)?;
    Ok(DecodedParts {
        latent,
        deltas,
        updates,
        gates: h.gates.clone(),
    })
}

/// Decodes a blob to an image of the original (unpadded) size.
pub fn unpack<T: Scalar>(blob: &CompressedBlob, model: &CodecModel<T>) -> Result<ImageTensor<T>> {
    let parts = unpack_parts(blob, model)?;
    let x = model.synthesize(&parts.latent, Some(&parts.updates), Some(&parts.gates))?;
    x.crop(blob.header.height, blob.header.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::delta_prior::quantize_delta;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> CodecModel<f32> {
        CodecModel::new(CodecConfig::default(), 3).unwrap()
    }

    fn image(h: usize, w: usize, seed: u64) -> ImageTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        ImageTensor::new(Tensor::from_vec(3, h, w, data)).unwrap()
    }

    fn random_delta(m: &CodecModel<f32>, k: usize, seed: u64) -> QuantizedDelta {
        let n = count_params(AdapterKind::LowRank, m.layer_shape(k), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-0.08..0.08)).collect();
        quantize_delta(&v, &DeltaPriorConfig::default())
    }

    fn encode(m: &CodecModel<f32>, x: &ImageTensor<f32>, gates: &GateVector, deltas: &[Option<QuantizedDelta>]) -> CompressedBlob {
        let y = m.analyze(&x.pad_to_multiple(8)).unwrap().quantized();
        pack(
            m,
            &PackRequest {
                latent: &y,
                deltas,
                gates,
                variant: AdapterKind::LowRank,
                rank: 2,
                prior: DeltaPriorConfig::default(),
                height: x.height(),
                width: x.width(),
                cluster: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn closed_gates_give_empty_model_stream() {
        let m = model();
        let x = image(24, 16, 1);
        let gates = GateVector::all(4, false);
        let blob = encode(&m, &x, &gates, &[None, None, None, None]);
        assert!(blob.model_stream.is_empty());
        let bytes = blob.to_bytes();
        assert_eq!(bytes.len(), blob.total_bytes());
        let back = CompressedBlob::from_bytes(&bytes).unwrap();
        assert_eq!(back, blob);
        let y = m.analyze(&x.pad_to_multiple(8)).unwrap().quantized();
        let base = m.synthesize(&y, None, None).unwrap().crop(24, 16).unwrap();
        assert_eq!(unpack(&back, &m).unwrap(), base);
        assert_eq!(blob.bpp(), blob.total_bits() as f64 / (24.0 * 16.0));
    }

    #[test]
    fn adapted_round_trip_matches_server_reconstruction() {
        let m = model();
        let x = image(21, 30, 2);
        let gates = GateVector::from_bits(vec![true, false, true, true]);
        let deltas = vec![
            Some(random_delta(&m, 0, 1)),
            None,
            Some(random_delta(&m, 2, 2)),
            Some(random_delta(&m, 3, 3)),
        ];
        let blob = encode(&m, &x, &gates, &deltas);
        let y = m.analyze(&x.pad_to_multiple(8)).unwrap().quantized();
        let updates = updates_from_quantized(&m, AdapterKind::LowRank, 2, &deltas).unwrap();
        let server = m.synthesize(&y, Some(&updates), Some(&gates)).unwrap().crop(21, 30).unwrap();
        let client = unpack(&CompressedBlob::from_bytes(&blob.to_bytes()).unwrap(), &m).unwrap();
        assert_eq!(client, server);
        let parts = unpack_parts(&blob, &m).unwrap();
        assert_eq!(parts.deltas, deltas);
        let est: f64 = deltas.iter().flatten().map(|d| d.rate_bits()).sum();
        assert!((blob.model_stream.len() * 8) as f64 <= est + 64.0);
    }

    #[test]
    fn mismatched_codec_is_rejected() {
        let m = model();
        let x = image(16, 16, 3);
        let blob = encode(&m, &x, &GateVector::all(4, false), &[None, None, None, None]);
        let other = CodecModel::<f32>::new(CodecConfig::default(), 4).unwrap();
        assert!(matches!(unpack(&blob, &other), Err(Error::Incompatible(_))));
        let mut bytes = blob.to_bytes();
        bytes[4] = 9;
        assert!(matches!(CompressedBlob::from_bytes(&bytes), Err(Error::Incompatible(_))));
    }

    #[test]
    fn truncation_and_bad_requests_error() {
        let m = model();
        let x = image(16, 16, 4);
        let gates = GateVector::first(4, 1);
        let deltas = vec![Some(random_delta(&m, 0, 5)), None, None, None];
        let bytes = encode(&m, &x, &gates, &deltas).to_bytes();
        for cut in [3, 20, bytes.len() - 1] {
            assert!(CompressedBlob::from_bytes(&bytes[..cut]).is_err());
        }
        let y = m.analyze(&x).unwrap().quantized();
        let bad = PackRequest {
            latent: &y,
            deltas: &[None, None, None, None],
            gates: &gates,
            variant: AdapterKind::LowRank,
            rank: 2,
            prior: DeltaPriorConfig::default(),
            height: 16,
            width: 16,
            cluster: None,
        };
        assert!(pack(&m, &bad).is_err());
    }

    #[test]
    fn cluster_id_round_trips() {
        let m = model();
        let x = image(16, 16, 6);
        let y = m.analyze(&x).unwrap().quantized();
        let gates = GateVector::from_bits(vec![false, false, true, false]);
        let deltas = vec![None, None, Some(random_delta(&m, 2, 7)), None];
        let req = PackRequest {
            latent: &y,
            deltas: &deltas,
            gates: &gates,
            variant: AdapterKind::LowRank,
            rank: 2,
            prior: DeltaPriorConfig::default(),
            height: 16,
            width: 16,
            cluster: Some(5),
        };
        let blob = pack(&m, &req).unwrap();
        let plain = pack(&m, &PackRequest { cluster: None, ..req.clone() }).unwrap();
        assert_eq!(blob.total_bytes(), plain.total_bytes() + 1);
        assert_eq!(CompressedBlob::from_bytes(&blob.to_bytes()).unwrap().header.cluster, Some(5));
    }
}
