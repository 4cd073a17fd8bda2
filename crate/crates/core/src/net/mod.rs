//! Conditional velocity network.
//!
//! `h_0 = [x, y, sin(f_k t), cos(f_k t); e_c]` is projected to width `d_h`, passed
//! through residual blocks `h += W2 silu(W1 h + b1) + b2`, and read out by a linear
//! head. The class-embedding table has one extra row for the null token. An optional
//! branch head taps the hidden state after `branch_index` blocks.
//!
//! Everything is batched over rows; gradients are written by hand.

pub mod adam;
pub mod checkpoint;

pub use adam::{adam_step, OptState};

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::{purpose, substream};
use crate::{Condition, Vec2, VelocityField};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("skip block {0} does not exist")]
    BadSkipBlock(usize),
    #[error("branch output requested but the network has no branch head")]
    NoBranchHead,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Network shape. `branch_index = Some(b)` taps the hidden state after `b` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arch {
    pub d_c: usize,
    pub d_h: usize,
    pub n_blocks: usize,
    pub branch_index: Option<usize>,
    pub n_freqs: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self { d_c: 16, d_h: 64, n_blocks: 4, branch_index: Some(1), n_freqs: 16 }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.d_c == 0 || self.d_h == 0 || self.n_freqs == 0 {
            return Err(NetError::InvalidArch("d_c, d_h and n_freqs must be positive".into()));
        }
        if self.n_blocks == 0 {
            return Err(NetError::InvalidArch("n_blocks must be >= 1".into()));
        }
        if let Some(b) = self.branch_index {
            if b == 0 || b >= self.n_blocks {
                return Err(NetError::InvalidArch(format!(
                    "branch_index {b} must satisfy 1 <= b < n_blocks ({})",
                    self.n_blocks
                )));
            }
        }
        Ok(())
    }

    /// Width of the state/time encoding.
    pub fn enc_dim(&self) -> usize {
        2 + 2 * self.n_freqs
    }

    pub fn input_dim(&self) -> usize {
        self.enc_dim() + self.d_c
    }
}

/// Affine map stored as `in × out` so a batch is `X · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(d_in: usize, d_out: usize) -> Self {
        Self { w: Array2::zeros((d_in, d_out)), b: Array1::zeros(d_out) }
    }

    fn fan_in<R: Rng>(d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let std = (1.0 / d_in as f64).sqrt();
        let w = Array2::from_shape_simple_fn((d_in, d_out), || std * rng.sample::<f64, _>(StandardNormal));
        Self { w, b: Array1::zeros(d_out) }
    }

    fn apply(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients and returns `dX`.
    fn backward(&self, x: &ArrayView2<f64>, dy: &Array2<f64>, grad: &mut Linear, want_dx: bool) -> Option<Array2<f64>> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        want_dx.then(|| dy.dot(&self.w.t()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub fc1: Linear,
    pub fc2: Linear,
}

/// All learnable state of the velocity network (also used as a gradient container).
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub arch: Arch,
    pub num_classes: usize,
    /// `(num_classes + 1) × d_c`; the last row is the null token.
    pub embed: Array2<f64>,
    pub time_freqs: Array1<f64>,
    pub input: Linear,
    pub blocks: Vec<Block>,
    pub head: Linear,
    pub branch_head: Option<Linear>,
    /// Number of optimizer updates applied.
    pub version: u64,
}

/// `n` frequencies log-spaced over `[1, 1000]`.
pub fn default_time_freqs(n: usize) -> Array1<f64> {
    if n == 1 {
        return Array1::from_elem(1, 1.0);
    }
    Array1::from_shape_fn(n, |k| 1000f64.powf(k as f64 / (n - 1) as f64))
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Closed-form parameter count of an architecture.
pub fn param_count(arch: &Arch, num_classes: usize) -> usize {
    let d_h = arch.d_h;
    let mut n = (num_classes + 1) * arch.d_c;
    n += arch.input_dim() * d_h + d_h;
    n += arch.n_blocks * 2 * (d_h * d_h + d_h);
    n += 2 * d_h + 2;
    if arch.branch_index.is_some() {
        n += 2 * d_h + 2;
    }
    n
}

pub fn init_params(arch: Arch, num_classes: usize, seed: u64) -> Result<NetParams> {
    arch.validate()?;
    if num_classes == 0 {
        return Err(NetError::InvalidArch("num_classes must be >= 1".into()));
    }
    let mut rng = substream(seed, purpose::INIT, 0);
    let embed =
        Array2::from_shape_simple_fn((num_classes + 1, arch.d_c), || rng.sample::<f64, _>(StandardNormal));
    let input = Linear::fan_in(arch.input_dim(), arch.d_h, &mut rng);
    let blocks = (0..arch.n_blocks)
        .map(|_| Block {
            fc1: Linear::fan_in(arch.d_h, arch.d_h, &mut rng),
            fc2: Linear::fan_in(arch.d_h, arch.d_h, &mut rng),
        })
        .collect();
    Ok(NetParams {
        arch,
        num_classes,
        embed,
        time_freqs: default_time_freqs(arch.n_freqs),
        input,
        blocks,
        head: Linear::zeros(arch.d_h, 2),
        branch_head: arch.branch_index.map(|_| Linear::zeros(arch.d_h, 2)),
        version: 0,
    })
}

/// Which extra outputs a forward pass should produce.
#[derive(Clone, Debug, Default)]
pub struct ForwardOpts {
    pub skip_blocks: Vec<usize>,
    pub want_branch: bool,
    pub want_trace: bool,
}

/// Cached activations of one batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    batch: usize,
    conds: Vec<Condition>,
    skip: Vec<bool>,
    h0: Array2<f64>,
    /// Hidden state entering each block, plus the final hidden state.
    hidden: Vec<Array2<f64>>,
    /// Pre-activation of the first affine layer per (non-skipped) block.
    pre: Vec<Option<Array2<f64>>>,
    /// `silu(pre)` per (non-skipped) block.
    post: Vec<Option<Array2<f64>>>,
    has_branch: bool,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn skip_mask(&self) -> &[bool] {
        &self.skip
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `B × 2`.
    pub velocity: Array2<f64>,
    pub branch_velocity: Option<Array2<f64>>,
    pub trace: Option<ForwardTrace>,
}

impl NetParams {
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.len());
        n
    }

    /// Zero tensor with the same shapes.
    pub fn zeros_like(&self) -> NetParams {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.iter_mut().for_each(|v| *v = 0.0));
        z.version = 0;
        z
    }

    fn slot(&self, cond: Condition) -> Result<usize> {
        match cond {
            Some(c) if c < self.num_classes => Ok(c),
            Some(c) => Err(NetError::ClassOutOfRange { class: c, num_classes: self.num_classes }),
            None => Ok(self.num_classes),
        }
    }

    /// Builds the `B × (enc + d_c)` input matrix.
    fn encode(&self, xs: &ArrayView2<f64>, ts: &[f64], conds: &[Condition]) -> Result<Array2<f64>> {
        let b = xs.nrows();
        if xs.ncols() != 2 || ts.len() != b || conds.len() != b {
            return Err(NetError::ShapeMismatch(format!(
                "x {:?}, {} times, {} conditions",
                xs.shape(),
                ts.len(),
                conds.len()
            )));
        }
        let nf = self.time_freqs.len();
        let enc = 2 + 2 * nf;
        let mut h0 = Array2::zeros((b, enc + self.arch.d_c));
        for (i, mut row) in h0.outer_iter_mut().enumerate() {
            row[0] = xs[(i, 0)];
            row[1] = xs[(i, 1)];
            for (k, &f) in self.time_freqs.iter().enumerate() {
                let (s, c) = (f * ts[i]).sin_cos();
                row[2 + k] = s;
                row[2 + nf + k] = c;
            }
            let slot = self.slot(conds[i])?;
            row.slice_mut(s![enc..]).assign(&self.embed.row(slot));
        }
        Ok(h0)
    }

    pub fn forward(
        &self,
        xs: &ArrayView2<f64>,
        ts: &[f64],
        conds: &[Condition],
        opts: &ForwardOpts,
    ) -> Result<ForwardOutput> {
        let n_blocks = self.blocks.len();
        let mut skip = vec![false; n_blocks];
        for &k in &opts.skip_blocks {
            *skip.get_mut(k).ok_or(NetError::BadSkipBlock(k))? = true;
        }
        let branch = match (opts.want_branch, &self.branch_head, self.arch.branch_index) {
            (false, _, _) => None,
            (true, Some(head), Some(idx)) => Some((head, idx)),
            _ => return Err(NetError::NoBranchHead),
        };
        let h0 = self.encode(xs, ts, conds)?;
        let mut h = self.input.apply(&h0.view());
        let mut hidden = Vec::new();
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut branch_velocity = None;
        for (k, block) in self.blocks.iter().enumerate() {
            if let Some((head, idx)) = branch {
                if idx == k {
                    branch_velocity = Some(head.apply(&h.view()));
                }
            }
            if opts.want_trace {
                hidden.push(h.clone());
            }
            if skip[k] {
                if opts.want_trace {
                    pre.push(None);
                    post.push(None);
                }
                continue;
            }
            let a1 = block.fc1.apply(&h.view());
            let z1 = a1.mapv(silu);
            let r = block.fc2.apply(&z1.view());
            h += &r;
            if opts.want_trace {
                pre.push(Some(a1));
                post.push(Some(z1));
            }
        }
        let velocity = self.head.apply(&h.view());
        let trace = opts.want_trace.then(|| {
            hidden.push(h);
            ForwardTrace {
                batch: xs.nrows(),
                conds: conds.to_vec(),
                skip,
                h0,
                hidden,
                pre,
                post,
                has_branch: branch.is_some(),
            }
        });
        Ok(ForwardOutput { velocity, branch_velocity, trace })
    }

    /// Reverse-mode gradients of `Σ_i <grad_velocity_i, v_i> + <grad_branch_i, v^br_i>`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_velocity: &Array2<f64>,
        grad_branch: Option<&Array2<f64>>,
    ) -> Result<NetParams> {
        let b = trace.batch;
        if grad_velocity.shape() != [b, 2] {
            return Err(NetError::ShapeMismatch(format!("grad_velocity {:?}, batch {b}", grad_velocity.shape())));
        }
        if trace.hidden.len() != self.blocks.len() + 1 || trace.skip.len() != self.blocks.len() {
            return Err(NetError::ShapeMismatch("trace does not match parameters".into()));
        }
        let branch = match grad_branch {
            None => None,
            Some(g) => {
                if g.shape() != [b, 2] {
                    return Err(NetError::ShapeMismatch(format!("grad_branch {:?}", g.shape())));
                }
                if !trace.has_branch {
                    return Err(NetError::ShapeMismatch("trace was recorded without the branch".into()));
                }
                match (&self.branch_head, self.arch.branch_index) {
                    (Some(head), Some(idx)) => Some((head, idx, g)),
                    _ => return Err(NetError::NoBranchHead),
                }
            }
        };
        let mut grads = self.zeros_like();
        let n = self.blocks.len();
        let mut dh = self
            .head
            .backward(&trace.hidden[n].view(), grad_velocity, &mut grads.head, true)
            .expect("dx requested");
        for k in (0..n).rev() {
            if !trace.skip[k] {
                let block = &self.blocks[k];
                let z1 = trace.post[k].as_ref().expect("traced block");
                let a1 = trace.pre[k].as_ref().expect("traced block");
                let mut dz1 = block.fc2.backward(&z1.view(), &dh, &mut grads.blocks[k].fc2, true).unwrap();
                ndarray::Zip::from(&mut dz1).and(a1).for_each(|d, &a| *d *= silu_grad(a));
                let dh_in = block.fc1.backward(&trace.hidden[k].view(), &dz1, &mut grads.blocks[k].fc1, true).unwrap();
                dh += &dh_in;
            }
            if let Some((head, idx, g)) = branch {
                if idx == k {
                    let gb = grads.branch_head.as_mut().expect("branch grads allocated");
                    let d = head.backward(&trace.hidden[k].view(), g, gb, true).unwrap();
                    dh += &d;
                }
            }
        }
        let dh0 = self.input.backward(&trace.h0.view(), &dh, &mut grads.input, true).unwrap();
        let enc = self.arch.enc_dim();
        for (i, cond) in trace.conds.iter().enumerate() {
            let slot = self.slot(*cond)?;
            let mut row = grads.embed.row_mut(slot);
            row += &dh0.slice(s![i, enc..]);
        }
        Ok(grads)
    }

    /// Velocities for a batch with per-row times.
    pub fn predict(&self, xs: &ArrayView2<f64>, ts: &[f64], conds: &[Condition], skip_blocks: &[usize]) -> Result<Array2<f64>> {
        let opts = ForwardOpts { skip_blocks: skip_blocks.to_vec(), ..Default::default() };
        Ok(self.forward(xs, ts, conds, &opts)?.velocity)
    }

    /// Visits learnable tensors in canonical order.
    pub fn visit<F: FnMut(&str, &[f64])>(&self, mut f: F) {
        f("embed", self.embed.as_slice().expect("standard layout"));
        f("input.w", self.input.w.as_slice().unwrap());
        f("input.b", self.input.b.as_slice().unwrap());
        for (k, bl) in self.blocks.iter().enumerate() {
            f(&format!("blocks.{k}.fc1.w"), bl.fc1.w.as_slice().unwrap());
            f(&format!("blocks.{k}.fc1.b"), bl.fc1.b.as_slice().unwrap());
            f(&format!("blocks.{k}.fc2.w"), bl.fc2.w.as_slice().unwrap());
            f(&format!("blocks.{k}.fc2.b"), bl.fc2.b.as_slice().unwrap());
        }
        f("head.w", self.head.w.as_slice().unwrap());
        f("head.b", self.head.b.as_slice().unwrap());
        if let Some(br) = &self.branch_head {
            f("branch_head.w", br.w.as_slice().unwrap());
            f("branch_head.b", br.b.as_slice().unwrap());
        }
    }

    pub fn for_each_mut<F: FnMut(&str, &mut [f64])>(&mut self, mut f: F) {
        for (name, t) in self.tensors_mut() {
            f(&name, t);
        }
    }

    /// Mutable learnable tensors in the same order as [`NetParams::visit`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        out.push(("embed".into(), self.embed.as_slice_mut().expect("standard layout")));
        out.push(("input.w".into(), self.input.w.as_slice_mut().unwrap()));
        out.push(("input.b".into(), self.input.b.as_slice_mut().unwrap()));
        for (k, bl) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{k}.fc1.w"), bl.fc1.w.as_slice_mut().unwrap()));
            out.push((format!("blocks.{k}.fc1.b"), bl.fc1.b.as_slice_mut().unwrap()));
            out.push((format!("blocks.{k}.fc2.w"), bl.fc2.w.as_slice_mut().unwrap()));
            out.push((format!("blocks.{k}.fc2.b"), bl.fc2.b.as_slice_mut().unwrap()));
        }
        out.push(("head.w".into(), self.head.w.as_slice_mut().unwrap()));
        out.push(("head.b".into(), self.head.b.as_slice_mut().unwrap()));
        if let Some(br) = self.branch_head.as_mut() {
            out.push(("branch_head.w".into(), br.w.as_slice_mut().unwrap()));
            out.push(("branch_head.b".into(), br.b.as_slice_mut().unwrap()));
        }
        out
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &NetParams, scale: f64) {
        let mut src = Vec::new();
        other.visit(|_, t| src.push(t.to_vec()));
        for ((_, dst), s) in self.tensors_mut().into_iter().zip(src) {
            dst.iter_mut().zip(s).for_each(|(d, v)| *d += scale * v);
        }
    }
}

/// Packs 2-vectors into a `B × 2` matrix.
pub fn to_matrix(xs: &[Vec2]) -> Array2<f64> {
    Array2::from_shape_fn((xs.len(), 2), |(i, j)| xs[i][j])
}

pub fn from_matrix(m: &Array2<f64>) -> Vec<Vec2> {
    m.outer_iter().map(|r| Vec2::new(r[0], r[1])).collect()
}

impl VelocityField for NetParams {
    fn velocity_batch(&self, xs: &[Vec2], t: f64, conds: &[Condition]) -> Vec<Vec2> {
        let ts = vec![t; xs.len()];
        let v = self.predict(&to_matrix(xs).view(), &ts, conds, &[]).expect("valid network inputs");
        from_matrix(&v)
    }
}

/// The network evaluated with some residual blocks bypassed.
#[derive(Clone, Copy, Debug)]
pub struct SkipBlocks<'a> {
    pub net: &'a NetParams,
    pub blocks: &'a [usize],
}

impl VelocityField for SkipBlocks<'_> {
    fn velocity_batch(&self, xs: &[Vec2], t: f64, conds: &[Condition]) -> Vec<Vec2> {
        let ts = vec![t; xs.len()];
        let v = self.net.predict(&to_matrix(xs).view(), &ts, conds, self.blocks).expect("valid network inputs");
        from_matrix(&v)
    }
}

/// The branch head of a network as a velocity field.
#[derive(Clone, Copy, Debug)]
pub struct BranchHead<'a>(pub &'a NetParams);

impl VelocityField for BranchHead<'_> {
    fn velocity_batch(&self, xs: &[Vec2], t: f64, conds: &[Condition]) -> Vec<Vec2> {
        let ts = vec![t; xs.len()];
        let opts = ForwardOpts { want_branch: true, ..Default::default() };
        let out = self.0.forward(&to_matrix(xs).view(), &ts, conds, &opts).expect("network has a branch head");
        from_matrix(&out.branch_velocity.expect("branch requested"))
    }
}
