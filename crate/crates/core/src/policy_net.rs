//! Shared-trunk actor-critic MLP with hand-written forward and backward
//! passes.
//!
//! Parameters live in one flat buffer described by a [`Layout`], so the
//! optimizer, gradient clipping and checkpointing work on plain slices.
//! Matrices are row-major `[in, out]`; a dense layer computes `y = x W + b`
//! over a row-major batch `x` of shape `[batch, in]`.
//!
//! The network is generic over [`Scalar`]: training runs in `f32`, the
//! finite-difference gradient oracles run in `f64`.

use std::fmt::Debug;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Bounds applied to the state-independent log standard deviation.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub const LOG_STD_INIT: f64 = -0.5;

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    /// Size in bytes, doubles as the checkpoint dtype tag.
    const BYTES: u8;

    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n` and `m x n`
    /// matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn f(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {
    const BYTES: u8 = 4;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const BYTES: u8 = 8;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// `C = op(A) op(B) + beta C` with row-major storage. `op(A)` is `m x k`;
/// when `a_t` is set, `a` holds the `k x m` matrix to transpose (same for `b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "lhs size");
    assert_eq!(b.len(), k * n, "rhs size");
    assert_eq!(c.len(), m * n, "output size");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above match the strides computed here.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Layer widths of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub obs_dim: usize,
    pub hidden: Vec<usize>,
    pub act_dim: usize,
}

impl Architecture {
    /// 21 -> 512 -> 512 -> 256 -> 128, actor head 4, critic head 1.
    pub fn standard() -> Self {
        Self {
            obs_dim: crate::world::OBS_DIM,
            hidden: vec![512, 512, 256, 128],
            act_dim: crate::world::ACT_DIM,
        }
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut dims = vec![self.obs_dim];
        dims.extend(&self.hidden);
        let trunk: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let h = *dims.last().unwrap();
        trunk + (h * self.act_dim + self.act_dim) + (h + 1) + self.act_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Position of every named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub arch: Architecture,
    pub tensors: Vec<Tensor>,
    pub total: usize,
}

impl Layout {
    pub fn new(arch: Architecture) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let t = Tensor {
                name,
                shape,
                offset,
            };
            offset += t.len();
            tensors.push(t);
        };
        let mut prev = arch.obs_dim;
        for (i, &h) in arch.hidden.iter().enumerate() {
            push(format!("trunk.{i}.weight"), vec![prev, h]);
            push(format!("trunk.{i}.bias"), vec![h]);
            prev = h;
        }
        push("actor.weight".into(), vec![prev, arch.act_dim]);
        push("actor.bias".into(), vec![arch.act_dim]);
        push("critic.weight".into(), vec![prev, 1]);
        push("critic.bias".into(), vec![1]);
        push("log_std".into(), vec![arch.act_dim]);
        Self {
            arch,
            tensors,
            total: offset,
        }
    }

    fn trunk_weight(&self, i: usize) -> &Tensor {
        &self.tensors[2 * i]
    }

    fn trunk_bias(&self, i: usize) -> &Tensor {
        &self.tensors[2 * i + 1]
    }

    fn head(&self, k: usize) -> &Tensor {
        &self.tensors[2 * self.arch.hidden.len() + k]
    }

    fn actor_weight(&self) -> &Tensor {
        self.head(0)
    }

    fn actor_bias(&self) -> &Tensor {
        self.head(1)
    }

    fn critic_weight(&self) -> &Tensor {
        self.head(2)
    }

    fn critic_bias(&self) -> &Tensor {
        self.head(3)
    }

    fn log_std(&self) -> &Tensor {
        self.head(4)
    }

    pub fn describe(&self) -> String {
        self.tensors
            .iter()
            .map(|t| format!("{} {:?}", t.name, t.shape))
            .collect::<Vec<_>>()
            .join(", ")
    }
}

/// All weights, biases and the policy log-std in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T: Scalar> {
    pub layout: Layout,
    pub data: Vec<T>,
}

/// Semi-orthogonal `rows x cols` matrix scaled by `gain`, row-major.
fn orthogonal(rows: usize, cols: usize, gain: f64, rng: &mut impl Rng) -> Vec<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    let g = DMatrix::<f64>::from_fn(tall, short, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let m = if rows >= cols { q } else { q.transpose() };
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(gain * m[(i, j)]);
        }
    }
    out
}

impl<T: Scalar> MlpParams<T> {
    pub fn zeros(arch: Architecture) -> Self {
        let layout = Layout::new(arch);
        let data = vec![T::zero(); layout.total];
        Self { layout, data }
    }

    /// Orthogonal initialization: gain sqrt(2) on the trunk, 0.01 on both
    /// heads, zero biases, log-std at -0.5.
    pub fn init(arch: Architecture, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(arch);
        let n_hidden = p.layout.arch.hidden.len();
        let mut weights: Vec<(usize, f64)> = (0..n_hidden).map(|i| (2 * i, 2f64.sqrt())).collect();
        weights.push((2 * n_hidden, 0.01));
        weights.push((2 * n_hidden + 2, 0.01));
        for (idx, gain) in weights {
            let t = p.layout.tensors[idx].clone();
            let w = orthogonal(t.shape[0], t.shape[1], gain, rng);
            for (dst, src) in p.data[t.range()].iter_mut().zip(w) {
                *dst = T::f(src);
            }
        }
        let ls = p.layout.log_std().range();
        p.data[ls].fill(T::f(LOG_STD_INIT));
        p
    }

    pub fn arch(&self) -> &Architecture {
        &self.layout.arch
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.tensors.iter().find(|t| t.name == name)?.range();
        Some(&mut self.data[r])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Log-std after clamping, as used by the policy head.
    pub fn log_std(&self) -> Vec<T> {
        self.data[self.layout.log_std().range()]
            .iter()
            .map(|&x| x.max(T::f(LOG_STD_MIN)).min(T::f(LOG_STD_MAX)))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> MlpParams<U> {
        MlpParams {
            layout: self.layout.clone(),
            data: self.data.iter().map(|x| U::f(x.as_f64())).collect(),
        }
    }

    /// Batched forward pass, keeping the activations needed by
    /// [`MlpParams::backward`].
    pub fn forward_batch(&self, obs: &[T], batch: usize) -> Result<ForwardCache<T>> {
        let arch = &self.layout.arch;
        if obs.len() != batch * arch.obs_dim {
            return Err(Error::Shape {
                expected: format!("{batch} x {}", arch.obs_dim),
                found: format!("{} values", obs.len()),
            });
        }
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(arch.hidden.len());
        let mut prev_dim = arch.obs_dim;
        for (i, &h) in arch.hidden.iter().enumerate() {
            let input: &[T] = if i == 0 { obs } else { &acts[i - 1] };
            let mut out = self.dense(
                input,
                batch,
                prev_dim,
                h,
                self.layout.trunk_weight(i),
                self.layout.trunk_bias(i),
            );
            for v in &mut out {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            acts.push(out);
            prev_dim = h;
        }
        let feat: &[T] = acts.last().map(|v| v.as_slice()).unwrap_or(obs);
        let mut mean = self.dense(
            feat,
            batch,
            prev_dim,
            arch.act_dim,
            self.layout.actor_weight(),
            self.layout.actor_bias(),
        );
        for m in &mut mean {
            *m = m.tanh();
        }
        let value = self.dense(
            feat,
            batch,
            prev_dim,
            1,
            self.layout.critic_weight(),
            self.layout.critic_bias(),
        );
        Ok(ForwardCache {
            batch,
            input: obs.to_vec(),
            acts,
            mean,
            value,
        })
    }

    fn dense(
        &self,
        x: &[T],
        batch: usize,
        in_dim: usize,
        out_dim: usize,
        w: &Tensor,
        b: &Tensor,
    ) -> Vec<T> {
        let bias = &self.data[b.range()];
        let mut y = Vec::with_capacity(batch * out_dim);
        for _ in 0..batch {
            y.extend_from_slice(bias);
        }
        gemm(batch, in_dim, out_dim, x, false, &self.data[w.range()], false, T::one(), &mut y);
        y
    }

    /// Single-observation forward pass.
    pub fn forward(&self, obs: &[f64]) -> Result<PolicyOutput> {
        let arch = &self.layout.arch;
        if obs.len() != arch.obs_dim {
            return Err(Error::Shape {
                expected: format!("observation of length {}", arch.obs_dim),
                found: format!("length {}", obs.len()),
            });
        }
        let x: Vec<T> = obs.iter().map(|&v| T::f(v)).collect();
        let cache = self.forward_batch(&x, 1)?;
        Ok(PolicyOutput {
            mean: cache.mean.iter().map(|m| m.as_f64()).collect(),
            log_std: self.log_std().iter().map(|m| m.as_f64()).collect(),
            value: cache.value[0].as_f64(),
        })
    }

    /// Exact gradient of a scalar loss given its gradient with respect to
    /// the actor means (`[batch, act]`), the values (`[batch]`) and the
    /// clamped log-std (`[act]`).
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        d_mean: &[T],
        d_value: &[T],
        d_log_std: &[T],
    ) -> Vec<T> {
        let arch = &self.layout.arch;
        let l = &self.layout;
        let batch = cache.batch;
        assert_eq!(d_mean.len(), batch * arch.act_dim);
        assert_eq!(d_value.len(), batch);
        assert_eq!(d_log_std.len(), arch.act_dim);
        let mut grad = vec![T::zero(); l.total];

        // tanh'
        let dz: Vec<T> = d_mean
            .iter()
            .zip(&cache.mean)
            .map(|(&g, &m)| g * (T::one() - m * m))
            .collect();
        let feat: &[T] = cache.acts.last().map(|v| v.as_slice()).unwrap_or(&cache.input);
        let h = arch.hidden.last().copied().unwrap_or(arch.obs_dim);

        gemm(h, batch, arch.act_dim, feat, true, &dz, false, T::zero(), &mut grad[l.actor_weight().range()]);
        col_sums(&dz, arch.act_dim, &mut grad[l.actor_bias().range()]);
        gemm(h, batch, 1, feat, true, d_value, false, T::zero(), &mut grad[l.critic_weight().range()]);
        grad[l.critic_bias().range()][0] = d_value.iter().fold(T::zero(), |a, &b| a + b);

        let mut dh = vec![T::zero(); batch * h];
        gemm(batch, arch.act_dim, h, &dz, false, &self.data[l.actor_weight().range()], true, T::zero(), &mut dh);
        gemm(batch, 1, h, d_value, false, &self.data[l.critic_weight().range()], true, T::one(), &mut dh);

        for i in (0..arch.hidden.len()).rev() {
            let out_dim = arch.hidden[i];
            let in_dim = if i == 0 { arch.obs_dim } else { arch.hidden[i - 1] };
            // ReLU'
            for (g, &a) in dh.iter_mut().zip(&cache.acts[i]) {
                if a <= T::zero() {
                    *g = T::zero();
                }
            }
            let input: &[T] = if i == 0 { &cache.input } else { &cache.acts[i - 1] };
            gemm(in_dim, batch, out_dim, input, true, &dh, false, T::zero(), &mut grad[l.trunk_weight(i).range()]);
            col_sums(&dh, out_dim, &mut grad[l.trunk_bias(i).range()]);
            if i > 0 {
                let mut prev = vec![T::zero(); batch * in_dim];
                gemm(batch, out_dim, in_dim, &dh, false, &self.data[l.trunk_weight(i).range()], true, T::zero(), &mut prev);
                dh = prev;
            }
        }

        let raw = &self.data[l.log_std().range()];
        for ((g, &d), &r) in grad[l.log_std().range()].iter_mut().zip(d_log_std).zip(raw) {
            // the clamp passes gradient only inside its range
            *g = if r >= T::f(LOG_STD_MIN) && r <= T::f(LOG_STD_MAX) {
                d
            } else {
                T::zero()
            };
        }
        grad
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(self.data.len() * T::BYTES as usize + 1024);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.push(T::BYTES);
        buf.extend_from_slice(&(self.layout.tensors.len() as u32).to_le_bytes());
        for t in &self.layout.tensors {
            buf.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(t.name.as_bytes());
            buf.push(t.shape.len() as u8);
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &self.data[t.range()] {
                v.write_le(&mut buf);
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`MlpParams::write_checkpoint`] and
    /// checks it against `arch`. Values stored at either precision are
    /// accepted; same-precision reloads are bit-exact.
    pub fn read_checkpoint<R: Read>(mut input: R, arch: Architecture) -> Result<Self> {
        let layout = Layout::new(arch);
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = cur.take(1)?[0];
        if dtype != 4 && dtype != 8 {
            return Err(Error::Checkpoint(format!("unknown dtype tag {dtype}")));
        }
        let n = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mismatch = |found: String| Error::Shape {
            expected: layout.describe(),
            found,
        };
        if n != layout.tensors.len() {
            return Err(mismatch(format!("{n} tensors")));
        }
        let mut data = vec![T::zero(); layout.total];
        for t in &layout.tensors {
            let name_len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8_lossy(cur.take(name_len)?).into_owned();
            let ndim = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
            }
            if name != t.name || shape != t.shape {
                return Err(mismatch(format!("{name} {shape:?}")));
            }
            for dst in &mut data[t.range()] {
                let raw = cur.take(dtype as usize)?;
                *dst = if dtype == 4 {
                    T::f(f32::read_le(raw) as f64)
                } else {
                    T::f(f64::read_le(raw))
                };
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
        }
        Ok(Self { layout, data })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path, arch: Architecture) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f), arch)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DNAVCKPT";
const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn col_sums<T: Scalar>(m: &[T], cols: usize, out: &mut [T]) {
    out.fill(T::zero());
    for row in m.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
}

/// Activations retained from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T: Scalar> {
    pub batch: usize,
    pub input: Vec<T>,
    /// Post-ReLU output of every trunk layer.
    pub acts: Vec<Vec<T>>,
    /// Actor means after tanh, `[batch, act]`.
    pub mean: Vec<T>,
    /// Critic values, `[batch]`.
    pub value: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    pub value: f64,
}

/// Log density of a diagonal Gaussian.
pub fn gaussian_log_prob(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&a, &m), &ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * ln_2pi
        })
        .sum()
}

/// Differential entropy of a diagonal Gaussian.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    let c = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    log_std.iter().map(|ls| ls + c).sum()
}

/// A sampled action: `clipped` goes to the environment, `raw` (pre-clip) is
/// what `log_prob` refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub clipped: Vec<f64>,
    pub raw: Vec<f64>,
    pub log_prob: f64,
}

pub fn sample_action(out: &PolicyOutput, rng: &mut impl Rng, deterministic: bool) -> SampledAction {
    let raw: Vec<f64> = if deterministic {
        out.mean.clone()
    } else {
        out.mean
            .iter()
            .zip(&out.log_std)
            .map(|(&m, &ls)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + ls.exp() * eps
            })
            .collect()
    };
    let log_prob = gaussian_log_prob(&raw, &out.mean, &out.log_std);
    SampledAction {
        clipped: raw.iter().map(|x| x.clamp(-1.0, 1.0)).collect(),
        raw,
        log_prob,
    }
}
