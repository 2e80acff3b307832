//! The meta-network that maps a scalar training loss to a learning rate.
//!
//! A single LSTM cell with two input paths: the scalar loss runs through
//! Linear(1,H) -> ReLU -> Linear(H,4H), the previous hidden state through
//! Linear(H,H) -> ReLU -> Linear(H,4H). The sums split into the four gates
//! (i, f, o, g), the cell updates as usual, and a final affine map plus
//! sigmoid squashes the hidden state to p in (0,1). The emitted rate is
//! alpha = gamma * p, so 0 < alpha < gamma always holds.
//!
//! backward_theta differentiates alpha with respect to every parameter for
//! a single step, holding the incoming recurrent state constant.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{relu, sigmoid, tanh_act, DenseMatrix, RngStream};

/// On-disk checkpoint format revision this build reads and writes.
pub const FORMAT_VERSION: u32 = 1;

/// Meta-network parameters. `hidden_size` is H; matrices are row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MLRSNetParams {
    hidden_size: usize,
    gamma: f64,
    /// (H x 1)
    pub input_path_w1: DenseMatrix,
    /// H
    pub input_path_b1: Vec<f64>,
    /// (4H x H)
    pub input_path_w2: DenseMatrix,
    /// 4H
    pub input_path_b2: Vec<f64>,
    /// (H x H)
    pub hidden_path_w1: DenseMatrix,
    /// H
    pub hidden_path_b1: Vec<f64>,
    /// (4H x H)
    pub hidden_path_w2: DenseMatrix,
    /// 4H
    pub hidden_path_b2: Vec<f64>,
    /// H
    pub output_w: Vec<f64>,
    pub output_b: f64,
    version: u64,
}

/// Recurrent cell state. Starts at zero for a fresh run.
#[derive(Debug, Clone, PartialEq)]
pub struct MLRSNetState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl MLRSNetState {
    pub fn zeros(hidden_size: usize) -> Self {
        MLRSNetState {
            h: vec![0.0; hidden_size],
            c: vec![0.0; hidden_size],
        }
    }
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    params_version: u64,
    loss_in: f64,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Input-path first-layer pre-activation and its ReLU output.
    u1_pre: Vec<f64>,
    u1: Vec<f64>,
    /// Hidden-path first-layer pre-activation and its ReLU output.
    v1_pre: Vec<f64>,
    v1: Vec<f64>,
    /// Gate activations, each length H.
    i: Vec<f64>,
    f: Vec<f64>,
    o: Vec<f64>,
    g: Vec<f64>,
    tanh_c: Vec<f64>,
    h_new: Vec<f64>,
    p: f64,
}

impl MLRSNetParams {
    /// Weights ~ uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero.
    pub fn init(hidden_size: usize, gamma: f64, rng: &mut RngStream) -> Result<Self> {
        if hidden_size == 0 {
            return Err(Error::Domain("hidden_size must be >= 1".into()));
        }
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
        }
        let h = hidden_size;
        let draw = |rng: &mut RngStream, rows: usize, cols: usize, fan_in: usize| {
            let s = 1.0 / (fan_in as f64).sqrt();
            let mut m = DenseMatrix::zeros(rows, cols);
            for v in m.as_mut_slice() {
                *v = rng.uniform_in(-s, s);
            }
            m
        };
        let input_path_w1 = draw(rng, h, 1, 1);
        let input_path_w2 = draw(rng, 4 * h, h, h);
        let hidden_path_w1 = draw(rng, h, h, h);
        let hidden_path_w2 = draw(rng, 4 * h, h, h);
        let s = 1.0 / (h as f64).sqrt();
        let output_w: Vec<f64> = (0..h).map(|_| rng.uniform_in(-s, s)).collect();
        Ok(MLRSNetParams {
            hidden_size: h,
            gamma,
            input_path_w1,
            input_path_b1: vec![0.0; h],
            input_path_w2,
            input_path_b2: vec![0.0; 4 * h],
            hidden_path_w1,
            hidden_path_b1: vec![0.0; h],
            hidden_path_w2,
            hidden_path_b2: vec![0.0; 4 * h],
            output_w,
            output_b: 0.0,
            version: 0,
        })
    }

    /// All-zero parameters; predicts alpha = gamma/2 regardless of input.
    pub fn zeroed(hidden_size: usize, gamma: f64) -> Self {
        let h = hidden_size;
        MLRSNetParams {
            hidden_size: h,
            gamma,
            input_path_w1: DenseMatrix::zeros(h, 1),
            input_path_b1: vec![0.0; h],
            input_path_w2: DenseMatrix::zeros(4 * h, h),
            input_path_b2: vec![0.0; 4 * h],
            hidden_path_w1: DenseMatrix::zeros(h, h),
            hidden_path_b1: vec![0.0; h],
            hidden_path_w2: DenseMatrix::zeros(4 * h, h),
            hidden_path_b2: vec![0.0; 4 * h],
            output_w: vec![0.0; h],
            output_b: 0.0,
            version: 0,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Replaces the output scale. Used by transfer runs that override gamma.
    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
        }
        self.gamma = gamma;
        self.version += 1;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let h = self.hidden_size;
        9 * h * h + 12 * h + 1
    }

    /// Flat layout: input_path_w1, input_path_b1, input_path_w2,
    /// input_path_b2, hidden_path_w1, hidden_path_b1, hidden_path_w2,
    /// hidden_path_b2, output_w, output_b. Matrices row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.input_path_w1.as_slice());
        out.extend_from_slice(&self.input_path_b1);
        out.extend_from_slice(self.input_path_w2.as_slice());
        out.extend_from_slice(&self.input_path_b2);
        out.extend_from_slice(self.hidden_path_w1.as_slice());
        out.extend_from_slice(&self.hidden_path_b1);
        out.extend_from_slice(self.hidden_path_w2.as_slice());
        out.extend_from_slice(&self.hidden_path_b2);
        out.extend_from_slice(&self.output_w);
        out.push(self.output_b);
        out
    }

    /// Inverse of [`MLRSNetParams::to_flat`]; gamma and H are untouched.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat length {} != parameter count {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut pos = 0;
        let mut take = |dst: &mut [f64]| {
            dst.copy_from_slice(&flat[pos..pos + dst.len()]);
            pos += dst.len();
        };
        take(self.input_path_w1.as_mut_slice());
        take(&mut self.input_path_b1);
        take(self.input_path_w2.as_mut_slice());
        take(&mut self.input_path_b2);
        take(self.hidden_path_w1.as_mut_slice());
        take(&mut self.hidden_path_b1);
        take(self.hidden_path_w2.as_mut_slice());
        take(&mut self.hidden_path_b2);
        take(&mut self.output_w);
        self.output_b = flat[pos];
        self.version += 1;
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite()) && self.gamma.is_finite()
    }

    /// One cell step: consumes a (normalized) scalar loss, returns the
    /// predicted rate, the advanced state, and the cache for backward_theta.
    pub fn forward(
        &self,
        state: &MLRSNetState,
        loss_in: f64,
    ) -> Result<(f64, MLRSNetState, ForwardCache)> {
        if !loss_in.is_finite() {
            return Err(Error::Domain(format!("non-finite loss input {loss_in}")));
        }
        let h = self.hidden_size;
        if state.h.len() != h || state.c.len() != h {
            return Err(Error::ShapeMismatch(format!(
                "state length {} != hidden size {h}",
                state.h.len()
            )));
        }

        let u1_pre: Vec<f64> = (0..h)
            .map(|j| self.input_path_w1.get(j, 0) * loss_in + self.input_path_b1[j])
            .collect();
        let u1: Vec<f64> = u1_pre.iter().map(|z| relu(*z).0).collect();
        let mut pre = self.input_path_w2.matvec(&u1);
        for (p, b) in pre.iter_mut().zip(self.input_path_b2.iter()) {
            *p += b;
        }

        let mut v1_pre = self.hidden_path_w1.matvec(&state.h);
        for (z, b) in v1_pre.iter_mut().zip(self.hidden_path_b1.iter()) {
            *z += b;
        }
        let v1: Vec<f64> = v1_pre.iter().map(|z| relu(*z).0).collect();
        let hidden_pre = self.hidden_path_w2.matvec(&v1);
        for ((p, hp), b) in pre
            .iter_mut()
            .zip(hidden_pre.iter())
            .zip(self.hidden_path_b2.iter())
        {
            *p += hp + b;
        }

        // Gate blocks in order (i, f, o, g).
        let i: Vec<f64> = pre[0..h].iter().map(|z| sigmoid(*z).0).collect();
        let f: Vec<f64> = pre[h..2 * h].iter().map(|z| sigmoid(*z).0).collect();
        let o: Vec<f64> = pre[2 * h..3 * h].iter().map(|z| sigmoid(*z).0).collect();
        let g: Vec<f64> = pre[3 * h..4 * h].iter().map(|z| tanh_act(*z).0).collect();

        let c_new: Vec<f64> = (0..h)
            .map(|j| f[j] * state.c[j] + i[j] * g[j])
            .collect();
        let tanh_c: Vec<f64> = c_new.iter().map(|c| tanh_act(*c).0).collect();
        let h_new: Vec<f64> = (0..h).map(|j| o[j] * tanh_c[j]).collect();

        let mut z = self.output_b;
        for (w, hv) in self.output_w.iter().zip(h_new.iter()) {
            z += w * hv;
        }
        let p = sigmoid(z).0;
        let alpha = self.gamma * p;

        let cache = ForwardCache {
            params_version: self.version,
            loss_in,
            h_prev: state.h.clone(),
            c_prev: state.c.clone(),
            u1_pre,
            u1,
            v1_pre,
            v1,
            i,
            f,
            o,
            g,
            tanh_c,
            h_new: h_new.clone(),
            p,
        };
        Ok((
            alpha,
            MLRSNetState {
                h: h_new,
                c: c_new,
            },
            cache,
        ))
    }

    /// d(alpha)/d(theta) for the step recorded in `cache`, holding the
    /// incoming state constant. Flat layout matches [`MLRSNetParams::to_flat`].
    pub fn backward_theta(
        &self,
        state_in: &MLRSNetState,
        cache: &ForwardCache,
    ) -> Result<Vec<f64>> {
        if cache.params_version != self.version {
            return Err(Error::Usage(
                "stale forward cache: meta parameters changed since forward".into(),
            ));
        }
        if state_in.h != cache.h_prev || state_in.c != cache.c_prev {
            return Err(Error::Usage(
                "state_in does not match the state captured by forward".into(),
            ));
        }
        let h = self.hidden_size;

        // alpha = gamma * sigmoid(z), z = output_w . h_new + output_b.
        let dz = self.gamma * cache.p * (1.0 - cache.p);
        let d_output_b = dz;
        let d_output_w: Vec<f64> = cache.h_new.iter().map(|hv| dz * hv).collect();

        // h_new = o * tanh(c_new); c_new = f * c_prev + i * g.
        let mut d_pre = vec![0.0; 4 * h];
        for j in 0..h {
            let dh = dz * self.output_w[j];
            let dc = dh * cache.o[j] * (1.0 - cache.tanh_c[j] * cache.tanh_c[j]);
            let (i, f, o, g) = (cache.i[j], cache.f[j], cache.o[j], cache.g[j]);
            d_pre[j] = dc * g * i * (1.0 - i);
            d_pre[h + j] = dc * cache.c_prev[j] * f * (1.0 - f);
            d_pre[2 * h + j] = dh * cache.tanh_c[j] * o * (1.0 - o);
            d_pre[3 * h + j] = dc * i * (1.0 - g * g);
        }

        // pre = input_path_w2 u1 + input_path_b2 + hidden_path_w2 v1 + hidden_path_b2.
        let mut d_input_w2 = DenseMatrix::zeros(4 * h, h);
        d_input_w2.add_outer(&d_pre, &cache.u1, 1.0);
        let mut d_hidden_w2 = DenseMatrix::zeros(4 * h, h);
        d_hidden_w2.add_outer(&d_pre, &cache.v1, 1.0);

        let mut d_u1 = self.input_path_w2.matvec_t(&d_pre);
        for (d, z) in d_u1.iter_mut().zip(cache.u1_pre.iter()) {
            *d *= relu(*z).1;
        }
        let mut d_v1 = self.hidden_path_w2.matvec_t(&d_pre);
        for (d, z) in d_v1.iter_mut().zip(cache.v1_pre.iter()) {
            *d *= relu(*z).1;
        }

        let mut d_hidden_w1 = DenseMatrix::zeros(h, h);
        d_hidden_w1.add_outer(&d_v1, &cache.h_prev, 1.0);

        let mut out = Vec::with_capacity(self.num_params());
        out.extend(d_u1.iter().map(|d| d * cache.loss_in)); // input_path_w1
        out.extend_from_slice(&d_u1); // input_path_b1
        out.extend_from_slice(d_input_w2.as_slice());
        out.extend_from_slice(&d_pre); // input_path_b2
        out.extend_from_slice(d_hidden_w1.as_slice());
        out.extend_from_slice(&d_v1); // hidden_path_b1
        out.extend_from_slice(d_hidden_w2.as_slice());
        out.extend_from_slice(&d_pre); // hidden_path_b2
        out.extend_from_slice(&d_output_w);
        out.push(d_output_b);
        debug_assert_eq!(out.len(), self.num_params());
        Ok(out)
    }
}

/// Loss preprocessing before it feeds the meta-net.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Normalizer {
    Identity,
    /// Divide by ln(classes); a uniform predictor's loss maps to 1.
    LogCardinality { classes: usize },
}

pub fn normalize_loss(raw_loss: f64, normalizer: Normalizer) -> f64 {
    match normalizer {
        Normalizer::Identity => raw_loss,
        Normalizer::LogCardinality { classes } => {
            assert!(classes >= 2, "log-cardinality normalizer needs classes >= 2");
            raw_loss / (classes as f64).ln()
        }
    }
}

/// Serialized checkpoint. Matrices are nested row arrays; floats use
/// shortest-round-trip decimal form, so a load reproduces the saved bits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub hidden_size: usize,
    pub gamma: f64,
    pub params: CheckpointArrays,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointArrays {
    pub input_path_w1: Vec<Vec<f64>>,
    pub input_path_b1: Vec<f64>,
    pub input_path_w2: Vec<Vec<f64>>,
    pub input_path_b2: Vec<f64>,
    pub hidden_path_w1: Vec<Vec<f64>>,
    pub hidden_path_b1: Vec<f64>,
    pub hidden_path_w2: Vec<Vec<f64>>,
    pub hidden_path_b2: Vec<f64>,
    pub output_w: Vec<Vec<f64>>,
    pub output_b: Vec<f64>,
}

/// Run provenance recorded alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
}

fn matrix_to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn rows_to_matrix(rows: &[Vec<f64>], want_rows: usize, want_cols: usize, name: &str) -> Result<DenseMatrix> {
    if rows.len() != want_rows || rows.iter().any(|r| r.len() != want_cols) {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint field {name}: expected {want_rows}x{want_cols}"
        )));
    }
    let mut data = Vec::with_capacity(want_rows * want_cols);
    for r in rows {
        data.extend_from_slice(r);
    }
    Ok(DenseMatrix::from_vec(want_rows, want_cols, data))
}

fn expect_len(v: &[f64], want: usize, name: &str) -> Result<()> {
    if v.len() != want {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint field {name}: expected length {want}, got {}",
            v.len()
        )));
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_params(params: &MLRSNetParams, meta: &CheckpointMeta) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            hidden_size: params.hidden_size(),
            gamma: params.gamma(),
            params: CheckpointArrays {
                input_path_w1: matrix_to_rows(&params.input_path_w1),
                input_path_b1: params.input_path_b1.clone(),
                input_path_w2: matrix_to_rows(&params.input_path_w2),
                input_path_b2: params.input_path_b2.clone(),
                hidden_path_w1: matrix_to_rows(&params.hidden_path_w1),
                hidden_path_b1: params.hidden_path_b1.clone(),
                hidden_path_w2: matrix_to_rows(&params.hidden_path_w2),
                hidden_path_b2: params.hidden_path_b2.clone(),
                output_w: vec![params.output_w.clone()],
                output_b: vec![params.output_b],
            },
            step: meta.step,
            seed: meta.seed,
            config_hash: meta.config_hash.clone(),
        }
    }

    pub fn to_params(&self) -> Result<MLRSNetParams> {
        let h = self.hidden_size;
        if h == 0 {
            return Err(Error::Domain("checkpoint hidden_size must be >= 1".into()));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Domain(format!(
                "checkpoint gamma must be positive, got {}",
                self.gamma
            )));
        }
        let a = &self.params;
        expect_len(&a.input_path_b1, h, "input_path_b1")?;
        expect_len(&a.input_path_b2, 4 * h, "input_path_b2")?;
        expect_len(&a.hidden_path_b1, h, "hidden_path_b1")?;
        expect_len(&a.hidden_path_b2, 4 * h, "hidden_path_b2")?;
        expect_len(&a.output_b, 1, "output_b")?;
        let output_w = rows_to_matrix(&a.output_w, 1, h, "output_w")?;
        let params = MLRSNetParams {
            hidden_size: h,
            gamma: self.gamma,
            input_path_w1: rows_to_matrix(&a.input_path_w1, h, 1, "input_path_w1")?,
            input_path_b1: a.input_path_b1.clone(),
            input_path_w2: rows_to_matrix(&a.input_path_w2, 4 * h, h, "input_path_w2")?,
            input_path_b2: a.input_path_b2.clone(),
            hidden_path_w1: rows_to_matrix(&a.hidden_path_w1, h, h, "hidden_path_w1")?,
            hidden_path_b1: a.hidden_path_b1.clone(),
            hidden_path_w2: rows_to_matrix(&a.hidden_path_w2, 4 * h, h, "hidden_path_w2")?,
            hidden_path_b2: a.hidden_path_b2.clone(),
            output_w: output_w.as_slice().to_vec(),
            output_b: a.output_b[0],
            version: 0,
        };
        if !params.is_finite() {
            return Err(Error::Domain("checkpoint contains non-finite values".into()));
        }
        Ok(params)
    }
}

pub fn save_checkpoint(params: &MLRSNetParams, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if !params.is_finite() {
        return Err(Error::Domain("refusing to save non-finite parameters".into()));
    }
    let ckpt = Checkpoint::from_params(params, meta);
    let text = serde_json::to_string_pretty(&ckpt)
        .map_err(|e| Error::Parse { offset: 0, message: e.to_string() })?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Byte offset of a serde_json (line, column) position inside `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut remaining = line - 1;
    let mut offset = 0;
    for (idx, b) in text.bytes().enumerate() {
        if remaining == 0 {
            break;
        }
        if b == b'\n' {
            remaining -= 1;
            offset = idx + 1;
        }
    }
    (offset + column.saturating_sub(1)).min(text.len())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;

    #[derive(Deserialize)]
    struct VersionProbe {
        format_version: u32,
    }
    let probe: VersionProbe = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: probe.format_version,
            supported: FORMAT_VERSION,
        });
    }

    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })?;
    Ok(ckpt)
}
