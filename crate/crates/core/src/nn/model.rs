//! Point-based transformer regressing 21 parameters per camera from the 2D
//! projections of the calibration fiducials.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{matrix_to_rot6d, slot, CameraParams, Point2, PARAMS_PER_CAMERA};
use crate::scene::ImageSize;
use crate::seed::{self, stream};

/// Output widths of the rotation (6D), translation, focal, principal point and distortion heads.
pub const HEAD_WIDTHS: [usize; 5] = [6, 3, 2, 2, 5];
const HEAD_NAMES: [&str; 5] = ["rot", "trans", "focal", "pp", "dist"];

pub const FOCAL_RANGE: f64 = 0.5;
pub const PRINCIPAL_RANGE: f64 = 0.25;
pub const DISTORTION_RANGE: f64 = 0.2;
/// Standard deviation multiplier for the last layer of every head, so the
/// untrained model starts close to the nominal calibration.
const HEAD_OUT_INIT: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub cie_noise_sigma: f64,
    pub n_cameras: usize,
    pub n_fiducials: usize,
    pub image_size: ImageSize,
    /// Half-width of the translation output range (meters).
    pub translation_range: f64,
    pub seed: u64,
}

impl PtModelConfig {
    /// Desk-scale defaults for a given rig/object size.
    pub fn desk(n_cameras: usize, n_fiducials: usize, image_size: ImageSize, radius: f64) -> Self {
        Self {
            d_model: 512,
            n_layers: 4,
            n_heads: 8,
            d_ff: 1024,
            cie_noise_sigma: 0.01,
            n_cameras,
            n_fiducials,
            image_size,
            translation_range: 2.0 * radius,
            seed: 0,
        }
    }

    /// Small configuration used by the smoke harnesses.
    pub fn smoke(n_cameras: usize, n_fiducials: usize, image_size: ImageSize, radius: f64) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            ..Self::desk(n_cameras, n_fiducials, image_size, radius)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_cameras", self.n_cameras),
            ("n_fiducials", self.n_fiducials),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.cie_noise_sigma >= 0.0) || !(self.translation_range > 0.0) {
            return Err(Error::InvalidConfig("cie_noise_sigma must be ≥ 0 and translation_range > 0".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        2 * self.n_fiducials
    }
}

/// Optimizer grouping; each group gets its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    Encoder,
    Heads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Ordered collection of named trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    fn add(&mut self, name: String, group: ParamGroup, value: Tensor) -> usize {
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }
}

/// `[N_C, d_model]` codes: one-hot of `i mod d_model` plus fixed Gaussian noise.
pub fn camera_identity_encoding<R: Rng + ?Sized>(n_cameras: usize, d_model: usize, sigma: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(&[n_cameras, d_model]);
    for (i, row) in t.data_mut().chunks_mut(d_model).enumerate() {
        row[i % d_model] = 1.0;
        for v in row.iter_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeadIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Output of a recorded forward pass.
pub struct Forward {
    /// Tape handles of every trainable parameter, in [`ParamStore`] order.
    pub params: Vec<Var>,
    /// `[batch·N_C, 21]` camera parameters.
    pub output: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PtModel {
    pub config: PtModelConfig,
    pub store: ParamStore,
    /// Frozen camera identity codes `[N_C, d_model]`.
    pub cie: Tensor,
    /// Nominal parameters `[N_C, 21]` that an all-zero head output maps to.
    pub nominal: Tensor,
    embed: (usize, usize),
    layers: Vec<LayerIdx>,
    heads: [HeadIdx; 5],
}

impl PtModel {
    /// Fresh model; `nominal` supplies the per-camera output centres.
    pub fn new(config: PtModelConfig, nominal: &[CameraParams]) -> Result<Self> {
        config.validate()?;
        if nominal.len() != config.n_cameras {
            return Err(Error::ShapeMismatch(format!(
                "{} nominal cameras for a {}-camera model",
                nominal.len(),
                config.n_cameras
            )));
        }
        let mut rng = seed::rng(seed::derive(config.seed, stream::MODEL_INIT, 0));
        let cie = camera_identity_encoding(config.n_cameras, config.d_model, config.cie_noise_sigma, &mut rng);
        let (d, ff) = (config.d_model, config.d_ff);
        let mut store = ParamStore::default();
        let dense = |store: &mut ParamStore, name: &str, group, fan_in: usize, fan_out: usize, gain: f64, rng: &mut _| {
            let w = Tensor::randn(&[fan_in, fan_out], gain / (fan_in as f64).sqrt(), rng);
            let wi = store.add(format!("{name}.w"), group, w);
            let bi = store.add(format!("{name}.b"), group, Tensor::zeros(&[fan_out]));
            (wi, bi)
        };
        let embed = dense(&mut store, "embed", ParamGroup::Embedding, config.input_width(), d, 1.0, &mut rng);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let g = ParamGroup::Encoder;
            let ln1_g = store.add(format!("layer{l}.ln1.g"), g, Tensor::full(&[d], 1.0));
            let ln1_b = store.add(format!("layer{l}.ln1.b"), g, Tensor::zeros(&[d]));
            let (wq, bq) = dense(&mut store, &format!("layer{l}.q"), g, d, d, 1.0, &mut rng);
            let (wk, bk) = dense(&mut store, &format!("layer{l}.k"), g, d, d, 1.0, &mut rng);
            let (wv, bv) = dense(&mut store, &format!("layer{l}.v"), g, d, d, 1.0, &mut rng);
            let (wo, bo) = dense(&mut store, &format!("layer{l}.o"), g, d, d, 1.0, &mut rng);
            let ln2_g = store.add(format!("layer{l}.ln2.g"), g, Tensor::full(&[d], 1.0));
            let ln2_b = store.add(format!("layer{l}.ln2.b"), g, Tensor::zeros(&[d]));
            let (w1, b1) = dense(&mut store, &format!("layer{l}.ff1"), g, d, ff, 1.0, &mut rng);
            let (w2, b2) = dense(&mut store, &format!("layer{l}.ff2"), g, ff, d, 1.0, &mut rng);
            layers.push(LayerIdx {
                ln1_g,
                ln1_b,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln2_g,
                ln2_b,
                w1,
                b1,
                w2,
                b2,
            });
        }
        let heads = std::array::from_fn(|h| {
            let g = ParamGroup::Heads;
            let (w1, b1) = dense(&mut store, &format!("head.{}.1", HEAD_NAMES[h]), g, d, d, 1.0, &mut rng);
            let (w2, b2) = dense(&mut store, &format!("head.{}.2", HEAD_NAMES[h]), g, d, HEAD_WIDTHS[h], HEAD_OUT_INIT, &mut rng);
            HeadIdx { w1, b1, w2, b2 }
        });
        let nominal = Tensor::new(
            vec![config.n_cameras, PARAMS_PER_CAMERA],
            nominal.iter().flat_map(|c| c.to_array()).collect(),
        )?;
        Ok(Self {
            config,
            store,
            cie,
            nominal,
            embed,
            layers,
            heads,
        })
    }

    /// Rebuilds a model around stored tensors (checkpoint loading).
    pub fn from_parts(config: PtModelConfig, nominal: Tensor, cie: Tensor, values: Vec<(String, Tensor)>) -> Result<Self> {
        let nominal_cams: Vec<CameraParams> = nominal.data().chunks(PARAMS_PER_CAMERA).map(CameraParams::from_slice).collect();
        let mut model = Self::new(config, &nominal_cams)?;
        if cie.shape() != model.cie.shape() || nominal.shape() != model.nominal.shape() {
            return Err(Error::ShapeMismatch("stored buffers do not match the model config".into()));
        }
        model.cie = cie;
        model.nominal = nominal;
        if values.len() != model.store.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} stored parameters, model has {}",
                values.len(),
                model.store.len()
            )));
        }
        for (p, (name, value)) in model.store.params.iter_mut().zip(values) {
            if p.name != name || p.value.shape() != value.shape() {
                return Err(Error::ShapeMismatch(format!("parameter {name} does not match {}", p.name)));
            }
            p.value = value;
        }
        Ok(model)
    }

    pub fn n_cameras(&self) -> usize {
        self.config.n_cameras
    }

    /// Maps observations `[batch][camera][fiducial]` into the `[-1, 1]` input tensor.
    pub fn prepare_input(&self, batch: &[&[Vec<Point2>]]) -> Result<Tensor> {
        let (nc, nf) = (self.config.n_cameras, self.config.n_fiducials);
        let (hw, hh) = (self.config.image_size.width / 2.0, self.config.image_size.height / 2.0);
        let mut data = Vec::with_capacity(batch.len() * nc * 2 * nf);
        for sample in batch {
            if sample.len() != nc || sample.iter().any(|c| c.len() != nf) {
                return Err(Error::ShapeMismatch(format!(
                    "observations must be {nc} cameras × {nf} fiducials"
                )));
            }
            for cam in sample.iter() {
                for p in cam {
                    data.push(p.x / hw - 1.0);
                    data.push(p.y / hh - 1.0);
                }
            }
        }
        Tensor::new(vec![batch.len() * nc, 2 * nf], data)
    }

    /// Output centres and scales for the non-rotation slots `[N_C, 12]`, and
    /// the 6D rotation centres `[N_C, 6]`.
    fn output_tables(&self) -> (Tensor, Tensor, Tensor) {
        let nc = self.config.n_cameras;
        let size = self.config.image_size;
        let mut scale = Vec::with_capacity(nc * 12);
        let mut offset = Vec::with_capacity(nc * 12);
        let mut r6 = Vec::with_capacity(nc * 6);
        for row in self.nominal.data().chunks(PARAMS_PER_CAMERA) {
            let cam = CameraParams::from_slice(row);
            r6.extend(matrix_to_rot6d(&cam.extrinsics.r).0);
            offset.extend_from_slice(&row[slot::TRANSLATION.start..]);
            scale.extend([self.config.translation_range; 3]);
            scale.extend(row[slot::FOCAL].iter().map(|f| FOCAL_RANGE * f.abs()));
            scale.extend([PRINCIPAL_RANGE * size.width, PRINCIPAL_RANGE * size.height]);
            scale.extend([DISTORTION_RANGE; 5]);
        }
        (
            Tensor::new(vec![nc, 12], scale).expect("12 slots"),
            Tensor::new(vec![nc, 12], offset).expect("12 slots"),
            Tensor::new(vec![nc, 6], r6).expect("6 slots"),
        )
    }

    /// Puts every trainable tensor on `tape`, in store order.
    pub fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.store.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    /// Affine embedding of each camera's flattened fiducial block (no CIE).
    pub fn embed(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, params[self.embed.0], params[self.embed.1])
    }

    /// Adds the identity codes and runs the encoder stack over each sample's cameras.
    pub fn encode(&self, tape: &mut Tape, params: &[Var], embedded: Var, batch: usize) -> Result<Var> {
        let p = |i: usize| params[i];
        let cie = tape.constant(self.cie.clone());
        let mut h = tape.add_rows_cyclic(embedded, cie)?;
        for l in &self.layers {
            let n1 = tape.layer_norm(h, p(l.ln1_g), p(l.ln1_b))?;
            let q = tape.linear(n1, p(l.wq), p(l.bq))?;
            let k = tape.linear(n1, p(l.wk), p(l.bk))?;
            let v = tape.linear(n1, p(l.wv), p(l.bv))?;
            let a = tape.attention(q, k, v, batch, self.config.n_cameras, self.config.n_heads)?;
            let o = tape.linear(a, p(l.wo), p(l.bo))?;
            h = tape.add(h, o)?;
            let n2 = tape.layer_norm(h, p(l.ln2_g), p(l.ln2_b))?;
            let f1 = tape.linear(n2, p(l.w1), p(l.b1))?;
            let f1 = tape.gelu(f1);
            let f2 = tape.linear(f1, p(l.w2), p(l.b2))?;
            h = tape.add(h, f2)?;
        }
        Ok(h)
    }

    /// Records the network on `tape` for a normalised `[batch·N_C, 2·N_fid]` input.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor) -> Result<Forward> {
        let nc = self.config.n_cameras;
        if input.cols() != self.config.input_width() || input.rows() % nc != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} for {nc} cameras × {} values",
                input.shape(),
                self.config.input_width()
            )));
        }
        let batch = input.rows() / nc;
        let params = self.leaves(tape);
        let x = tape.constant(input.clone());
        let e = self.embed(tape, &params, x)?;
        let h = self.encode(tape, &params, e, batch)?;
        let p = |i: usize| params[i];
        let mut raw = Vec::with_capacity(5);
        for hd in &self.heads {
            let z = tape.linear(h, p(hd.w1), p(hd.b1))?;
            let z = tape.gelu(z);
            raw.push(tape.linear(z, p(hd.w2), p(hd.b2))?);
        }
        let (scale, offset, r6_centre) = self.output_tables();
        let r6 = tape.affine_rows_cyclic(raw[0], &Tensor::full(r6_centre.shape(), 1.0), &r6_centre)?;
        let rot = tape.gram_schmidt(r6)?;
        let rest = tape.concat_cols(&raw[1..])?;
        let rest = tape.affine_rows_cyclic(rest, &scale, &offset)?;
        let output = tape.concat_cols(&[rot, rest])?;
        Ok(Forward { params, output })
    }

    /// Predicted cameras for each sample in `batch`.
    pub fn predict_batch(&self, batch: &[&[Vec<Point2>]]) -> Result<Vec<Vec<CameraParams>>> {
        let input = self.prepare_input(batch)?;
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, &input)?;
        let nc = self.config.n_cameras;
        Ok(tape
            .value(out.output)
            .data()
            .chunks(PARAMS_PER_CAMERA * nc)
            .map(|s| s.chunks(PARAMS_PER_CAMERA).map(CameraParams::from_slice).collect())
            .collect())
    }

    pub fn predict(&self, observations: &[Vec<Point2>]) -> Result<Vec<CameraParams>> {
        Ok(self.predict_batch(&[observations])?.remove(0))
    }

    /// Zeroes every head's output layer so the forward pass returns the nominal parameters.
    pub fn zero_heads(&mut self) {
        for h in &self.heads {
            for i in [h.w2, h.b2] {
                self.store.params[i].value.data_mut().fill(0.0);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{orthogonality_error, Extrinsics, Intrinsics};

    fn cams(n: usize) -> Vec<CameraParams> {
        (0..n)
            .map(|i| CameraParams {
                extrinsics: Extrinsics {
                    r: crate::geometry::rot_z(0.3 * i as f64),
                    t: nalgebra::Vector3::new(0.1 * i as f64, 0.0, 1.5),
                },
                intrinsics: Intrinsics {
                    k1: 0.01,
                    ..Intrinsics::pinhole(1100.0, 1100.0, 512.0, 512.0)
                },
            })
            .collect()
    }

    fn tiny(nc: usize, nf: usize) -> PtModelConfig {
        PtModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 12,
            ..PtModelConfig::smoke(nc, nf, ImageSize::square(1024.0), 1.5)
        }
    }

    fn obs(nc: usize, nf: usize, s: u64) -> Vec<Vec<Point2>> {
        let mut rng = seed::rng(s);
        (0..nc)
            .map(|_| (0..nf).map(|_| Point2::new(rng.random::<f64>() * 1024.0, rng.random::<f64>() * 1024.0)).collect())
            .collect()
    }

    #[test]
    fn cie_examples() {
        let mut rng = seed::rng(0);
        let e = camera_identity_encoding(3, 4, 0.0, &mut rng);
        assert_eq!(e.data(), &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0.]);
        for i in 0..3 {
            for j in i + 1..3 {
                let d: f64 = (0..4).map(|c| (e.data()[i * 4 + c] - e.data()[j * 4 + c]).powi(2)).sum();
                assert_eq!(d.sqrt(), 2f64.sqrt());
            }
        }
        let e = camera_identity_encoding(6, 4, 0.01, &mut rng);
        assert_ne!(&e.data()[0..4], &e.data()[16..20]);
    }

    #[test]
    fn output_shape_and_orthogonality() {
        let model = PtModel::new(tiny(3, 4), &cams(3)).unwrap();
        let o = [obs(3, 4, 1), obs(3, 4, 2)];
        let preds = model.predict_batch(&[&o[0], &o[1]]).unwrap();
        assert_eq!(preds.len(), 2);
        for sample in &preds {
            assert_eq!(sample.len(), 3);
            for c in sample {
                assert!(orthogonality_error(&c.extrinsics.r) < 1e-9);
                assert!((c.extrinsics.r.determinant() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_heads_return_nominal() {
        let nominal = cams(4);
        let mut model = PtModel::new(tiny(4, 5), &nominal).unwrap();
        model.zero_heads();
        let pred = model.predict(&obs(4, 5, 3)).unwrap();
        for (p, n) in pred.iter().zip(&nominal) {
            for (a, b) in p.to_array().iter().zip(n.to_array()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn embedding_is_affine() {
        let model = PtModel::new(tiny(2, 3), &cams(2)).unwrap();
        let x = Tensor::randn(&[4, 6], 1.0, &mut seed::rng(5));
        let mut tape = Tape::new();
        let params = model.leaves(&mut tape);
        let xv = tape.constant(x.clone());
        let embed_out = model.embed(&mut tape, &params, xv).unwrap();
        let w = &model.store.get("embed.w").unwrap().value;
        for r in 0..4 {
            for j in 0..8 {
                let want: f64 = (0..6).map(|k| x.data()[r * 6 + k] * w.data()[k * 8 + j]).sum();
                assert!((tape.value(embed_out).data()[r * 8 + j] - want).abs() < 1e-12);
            }
        }
    }

    fn reference_encoder(model: &PtModel, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let cfg = &model.config;
        let (d, nh) = (cfg.d_model, cfg.n_heads);
        let dh = d / nh;
        let w = |name: &str| model.store.get(name).unwrap().value.data().to_vec();
        let lin = |x: &[f64], wm: &[f64], b: &[f64], n_out: usize| -> Vec<f64> {
            (0..n_out).map(|j| b[j] + x.iter().enumerate().map(|(k, v)| v * wm[k * n_out + j]).sum::<f64>()).collect()
        };
        let ln = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
            let n = x.len() as f64;
            let mu = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            x.iter().enumerate().map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j]).collect()
        };
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh());
        let mut h: Vec<Vec<f64>> = x
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let e = lin(row, &w("embed.w"), &w("embed.b"), d);
                e.iter().zip(&model.cie.data()[i * d..(i + 1) * d]).map(|(a, b)| a + b).collect()
            })
            .collect();
        for l in 0..cfg.n_layers {
            let name = |s: &str| format!("layer{l}.{s}");
            let n1: Vec<Vec<f64>> = h.iter().map(|r| ln(r, &w(&name("ln1.g")), &w(&name("ln1.b")))).collect();
            let q: Vec<_> = n1.iter().map(|r| lin(r, &w(&name("q.w")), &w(&name("q.b")), d)).collect();
            let k: Vec<_> = n1.iter().map(|r| lin(r, &w(&name("k.w")), &w(&name("k.b")), d)).collect();
            let v: Vec<_> = n1.iter().map(|r| lin(r, &w(&name("v.w")), &w(&name("v.b")), d)).collect();
            let t = h.len();
            let mut att = vec![vec![0.0; d]; t];
            for head in 0..nh {
                for i in 0..t {
                    let logits: Vec<f64> = (0..t)
                        .map(|j| (0..dh).map(|c| q[i][head * dh + c] * k[j][head * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|a| (a - m).exp()).sum();
                    for j in 0..t {
                        let pj = (logits[j] - m).exp() / z;
                        for c in 0..dh {
                            att[i][head * dh + c] += pj * v[j][head * dh + c];
                        }
                    }
                }
            }
            for i in 0..t {
                let o = lin(&att[i], &w(&name("o.w")), &w(&name("o.b")), d);
                for j in 0..d {
                    h[i][j] += o[j];
                }
                let n2 = ln(&h[i], &w(&name("ln2.g")), &w(&name("ln2.b")));
                let f1: Vec<f64> = lin(&n2, &w(&name("ff1.w")), &w(&name("ff1.b")), cfg.d_ff).into_iter().map(gelu).collect();
                let f2 = lin(&f1, &w(&name("ff2.w")), &w(&name("ff2.b")), d);
                for j in 0..d {
                    h[i][j] += f2[j];
                }
            }
        }
        h
    }

    fn encode_rows(model: &PtModel, x: &Tensor, batch: usize) -> Tensor {
        let mut tape = Tape::new();
        let params = model.leaves(&mut tape);
        let xv = tape.constant(x.clone());
        let e = model.embed(&mut tape, &params, xv).unwrap();
        let h = model.encode(&mut tape, &params, e, batch).unwrap();
        tape.value(h).clone()
    }

    #[test]
    fn encoder_matches_loop_reference() {
        let mut cfg = tiny(3, 4);
        cfg.n_layers = 2;
        let mut model = PtModel::new(cfg, &cams(3)).unwrap();
        // perturb norms and biases away from their trivial init
        let mut rng = seed::rng(7);
        for p in &mut model.store.params {
            for v in p.value.data_mut() {
                *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let got = encode_rows(&model, &x, 1);
        let rows: Vec<Vec<f64>> = x.data().chunks(8).map(|r| r.to_vec()).collect();
        let want = reference_encoder(&model, &rows);
        for (g, w) in got.data().chunks(8).zip(&want) {
            for (a, b) in g.iter().zip(w) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn zeroed_blocks_are_residual_identity() {
        let mut model = PtModel::new(tiny(3, 4), &cams(3)).unwrap();
        for name in ["layer0.o.w", "layer0.o.b", "layer0.ff2.w", "layer0.ff2.b"] {
            model.store.get_mut(name).unwrap().value.data_mut().fill(0.0);
        }
        let x = Tensor::randn(&[6, 8], 1.0, &mut seed::rng(8));
        let got = encode_rows(&model, &x, 2);
        let mut tape = Tape::new();
        let params = model.leaves(&mut tape);
        let xv = tape.constant(x);
        let e = model.embed(&mut tape, &params, xv).unwrap();
        let cie = tape.constant(model.cie.clone());
        let want = tape.add_rows_cyclic(e, cie).unwrap();
        assert_eq!(got.data(), tape.value(want).data());
    }

    #[test]
    fn rejects_bad_shapes() {
        let model = PtModel::new(tiny(2, 3), &cams(2)).unwrap();
        assert!(model.predict(&obs(3, 3, 1)).is_err());
        assert!(PtModel::new(tiny(2, 3), &cams(3)).is_err());
        let mut cfg = tiny(2, 3);
        cfg.n_heads = 3;
        assert!(PtModel::new(cfg, &cams(2)).is_err());
    }
}
