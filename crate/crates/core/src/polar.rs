//! Eight-neighbor polar self-attention: the per-position 9-way attention
//! score matrix, the polar-weighted output feature map, box-pooled polar
//! scores, the polar supervision loss, and hand-derived gradients for all of
//! it.
//!
//! At every spatial position the query vector is dotted against the key
//! vectors of the eight neighbors plus itself (in the fixed order below) and
//! the nine scores are softmax-normalized. A key property used throughout:
//! the nine channels of the score matrix sum to one at every position, so
//! box-pooled scores satisfy `8 * p_polar + p_non_polar == 1`.

use std::io::{Read, Write};

use crate::detect::{box_to_grid, DetectionBox, GridRange};
use crate::error::{Error, Result};
use crate::tensor::{
    project, project_backward, softmax9, softmax9_backward, FeatureMap, LinearProjection, Scalar,
};

/// Neighbor offsets in scan order; index 4 is the self/center entry.
pub const NEIGHBOR_OFFSETS: [(i32, i32); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Channel of the self/center entry in a [`PasMatrix`].
pub const CENTER: usize = 4;

/// Default epsilon of the per-position L2 feature normalization.
pub const NORM_EPSILON: f64 = 1e-6;

pub const PAS_MAGIC: &[u8; 4] = b"PAS1";
pub const PARAMS_MAGIC: &[u8; 4] = b"PPK1";

/// How neighbor lookups behave at the grid border.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorderMode {
    /// Out-of-bounds key and value vectors are zero: a padded key yields
    /// logit 0 and a padded value contributes the bare `1 + 0` term.
    Zero,
    /// Out-of-bounds lookups clamp to the nearest edge cell.
    Replicate,
}

impl BorderMode {
    pub fn code(self) -> u8 {
        match self {
            BorderMode::Zero => 0,
            BorderMode::Replicate => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(BorderMode::Zero),
            1 => Ok(BorderMode::Replicate),
            other => Err(Error::Format(format!("unknown border mode {other}"))),
        }
    }
}

/// Resolve the `n`-th neighbor of `(i, j)`. `None` means out of bounds.
#[inline]
fn neighbor(i: usize, j: usize, n: usize, h: usize, w: usize) -> Option<(usize, usize)> {
    let (di, dj) = NEIGHBOR_OFFSETS[n];
    let ni = i as i32 + di;
    let nj = j as i32 + dj;
    if ni < 0 || nj < 0 || ni >= h as i32 || nj >= w as i32 {
        None
    } else {
        Some((ni as usize, nj as usize))
    }
}

#[inline]
fn neighbor_clamped(i: usize, j: usize, n: usize, h: usize, w: usize) -> (usize, usize) {
    let (di, dj) = NEIGHBOR_OFFSETS[n];
    let ni = (i as i32 + di).clamp(0, h as i32 - 1);
    let nj = (j as i32 + dj).clamp(0, w as i32 - 1);
    (ni as usize, nj as usize)
}

/// Per-position attention probabilities over the eight neighbors plus self,
/// stored as `9 x height x width` in channel-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct PasMatrix<T: Scalar = f64> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> PasMatrix<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![T::zero(); 9 * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, n: usize, i: usize, j: usize) -> usize {
        debug_assert!(n < 9 && i < self.height && j < self.width);
        (n * self.height + i) * self.width + j
    }

    #[inline]
    pub fn get(&self, n: usize, i: usize, j: usize) -> T {
        self.data[self.idx(n, i, j)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, i: usize, j: usize, v: T) {
        let k = self.idx(n, i, j);
        self.data[k] = v;
    }

    #[inline]
    pub fn add_at(&mut self, n: usize, i: usize, j: usize, v: T) {
        let k = self.idx(n, i, j);
        self.data[k] = self.data[k] + v;
    }

    /// Largest deviation of any per-position channel sum from one.
    pub fn max_sum_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.height {
            for j in 0..self.width {
                let mut sum = T::zero();
                for n in 0..9 {
                    sum = sum + self.get(n, i, j);
                }
                worst = worst.max((sum.to_f64_lossy() - 1.0).abs());
            }
        }
        worst
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        crate::tensor::write_block(w, PAS_MAGIC, (9, self.height, self.width), &self.data)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let (c, h, width, data) = crate::tensor::read_block(r, PAS_MAGIC)?;
        if c != 9 {
            return Err(Error::Format(format!("PAS block has {c} channels, expected 9")));
        }
        Ok(Self {
            height: h,
            width,
            data,
        })
    }
}

/// Box-pooled polar salience (mean of the eight non-center channels) and its
/// complement (mean of the center channel).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolarScores {
    pub p_polar: f64,
    pub p_non_polar: f64,
}

/// The three 1x1 projections of the polar attention module plus the feature
/// normalization epsilon and border policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarAttention<T: Scalar = f64> {
    pub q_proj: LinearProjection<T>,
    pub k_proj: LinearProjection<T>,
    pub v_proj: LinearProjection<T>,
    pub norm_epsilon: f64,
    pub border: BorderMode,
}

/// Intermediates retained by [`PolarAttention::forward`] for the backward
/// pass.
#[derive(Debug, Clone)]
pub struct PolarForward<T: Scalar = f64> {
    pub q: FeatureMap<T>,
    pub k: FeatureMap<T>,
    pub v: FeatureMap<T>,
    pub pas: PasMatrix<T>,
    /// Weighted sum before normalization.
    pub pre_norm: FeatureMap<T>,
    pub y: FeatureMap<T>,
}

/// Input-side gradients returned by the backward pass. The logit gradient is
/// kept around because softmax shift invariance makes its per-position sum a
/// useful zero check.
#[derive(Debug, Clone)]
pub struct PolarBackward {
    pub d_input: FeatureMap<f64>,
    pub d_logits: PasMatrix<f64>,
}

impl<T: Scalar> PolarAttention<T> {
    pub fn zeros(channels: usize) -> Self {
        Self {
            q_proj: LinearProjection::zeros(channels, channels),
            k_proj: LinearProjection::zeros(channels, channels),
            v_proj: LinearProjection::zeros(channels, channels),
            norm_epsilon: NORM_EPSILON,
            border: BorderMode::Zero,
        }
    }

    pub fn channels(&self) -> usize {
        self.q_proj.in_channels
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        let c = self.channels();
        if self.q_proj.out_channels != c
            || self.k_proj.in_channels != c
            || self.k_proj.out_channels != c
            || self.v_proj.in_channels != c
            || self.v_proj.out_channels != c
        {
            return Err(Error::Dimension("polar projections must all be CxC".into()));
        }
        if x.channels != c {
            return Err(Error::Dimension(format!(
                "input has {} channels, polar module expects {c}",
                x.channels
            )));
        }
        Ok(())
    }

    /// Eq. of the score matrix: per position, softmax over the dot products
    /// of the query with the nine neighbor keys.
    pub fn compute_pas(&self, x: &FeatureMap<T>) -> Result<PasMatrix<T>> {
        self.check_input(x)?;
        let q = project(&self.q_proj, x)?;
        let k = project(&self.k_proj, x)?;
        Ok(self.pas_from_qk(&q, &k))
    }

    fn pas_from_qk(&self, q: &FeatureMap<T>, k: &FeatureMap<T>) -> PasMatrix<T> {
        let (c_n, h, w) = (q.channels, q.height, q.width);
        let mut pas = PasMatrix::zeros(h, w);
        for i in 0..h {
            for j in 0..w {
                let mut logits = [T::zero(); 9];
                for (n, logit) in logits.iter_mut().enumerate() {
                    let coords = match self.border {
                        BorderMode::Zero => neighbor(i, j, n, h, w),
                        BorderMode::Replicate => Some(neighbor_clamped(i, j, n, h, w)),
                    };
                    if let Some((ni, nj)) = coords {
                        let mut dot = T::zero();
                        for c in 0..c_n {
                            dot = dot + q.get(c, i, j) * k.get(c, ni, nj);
                        }
                        *logit = dot;
                    }
                }
                let probs = softmax9(&logits);
                for (n, &p) in probs.iter().enumerate() {
                    pas.set(n, i, j, p);
                }
            }
        }
        pas
    }

    /// Weighted sum of `1 + V` over the nine neighbors, before normalization.
    pub fn weighted_sum(v: &FeatureMap<T>, pas: &PasMatrix<T>, border: BorderMode) -> Result<FeatureMap<T>> {
        if v.height != pas.height || v.width != pas.width {
            return Err(Error::Dimension("value map and PAS matrix disagree on H x W".into()));
        }
        let (c_n, h, w) = (v.channels, v.height, v.width);
        let mut s = FeatureMap::zeros(c_n, h, w);
        let one = T::one();
        for i in 0..h {
            for j in 0..w {
                for n in 0..9 {
                    let p = pas.get(n, i, j);
                    let coords = match border {
                        BorderMode::Zero => neighbor(i, j, n, h, w),
                        BorderMode::Replicate => Some(neighbor_clamped(i, j, n, h, w)),
                    };
                    match coords {
                        Some((ni, nj)) => {
                            for c in 0..c_n {
                                s.add_at(c, i, j, p * (one + v.get(c, ni, nj)));
                            }
                        }
                        None => {
                            for c in 0..c_n {
                                s.add_at(c, i, j, p);
                            }
                        }
                    }
                }
            }
        }
        Ok(s)
    }

    /// Per-position L2 normalization across channels.
    fn normalize(&self, s: &FeatureMap<T>) -> FeatureMap<T> {
        let (c_n, h, w) = (s.channels, s.height, s.width);
        let eps = T::from_f64_lossy(self.norm_epsilon);
        let mut y = FeatureMap::zeros(c_n, h, w);
        for i in 0..h {
            for j in 0..w {
                let mut sq = T::zero();
                for c in 0..c_n {
                    let v = s.get(c, i, j);
                    sq = sq + v * v;
                }
                let denom = (sq + eps).sqrt();
                for c in 0..c_n {
                    y.set(c, i, j, s.get(c, i, j) / denom);
                }
            }
        }
        y
    }

    /// Polar-weighted output features for a PAS matrix produced from `x`.
    pub fn weighted_features(&self, x: &FeatureMap<T>, pas: &PasMatrix<T>) -> Result<FeatureMap<T>> {
        self.check_input(x)?;
        if x.height != pas.height || x.width != pas.width {
            return Err(Error::Dimension("input and PAS matrix disagree on H x W".into()));
        }
        let v = project(&self.v_proj, x)?;
        let s = Self::weighted_sum(&v, pas, self.border)?;
        Ok(self.normalize(&s))
    }

    /// Full forward pass with retained intermediates.
    pub fn forward(&self, x: &FeatureMap<T>) -> Result<PolarForward<T>> {
        self.check_input(x)?;
        let q = project(&self.q_proj, x)?;
        let k = project(&self.k_proj, x)?;
        let v = project(&self.v_proj, x)?;
        let pas = self.pas_from_qk(&q, &k);
        let pre_norm = Self::weighted_sum(&v, &pas, self.border)?;
        let y = self.normalize(&pre_norm);
        Ok(PolarForward { q, k, v, pas, pre_norm, y })
    }

    pub fn zero_grad(&mut self) {
        self.q_proj.zero_grad();
        self.k_proj.zero_grad();
        self.v_proj.zero_grad();
    }

    pub fn sgd_step(&mut self, lr: T) {
        self.q_proj.sgd_step(lr);
        self.k_proj.sgd_step(lr);
        self.v_proj.sgd_step(lr);
    }

    pub fn absorb_grads(&mut self, other: &Self) {
        self.q_proj.absorb_grads(&other.q_proj);
        self.k_proj.absorb_grads(&other.k_proj);
        self.v_proj.absorb_grads(&other.v_proj);
    }

    pub fn map_precision<U: Scalar>(&self) -> PolarAttention<U> {
        PolarAttention {
            q_proj: self.q_proj.map_precision(),
            k_proj: self.k_proj.map_precision(),
            v_proj: self.v_proj.map_precision(),
            norm_epsilon: self.norm_epsilon,
            border: self.border,
        }
    }

    /// Checkpoint: magic, border mode, normalization epsilon, then the three
    /// projections in dump order q, k, v.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PARAMS_MAGIC)?;
        w.write_all(&[self.border.code()])?;
        w.write_all(&self.norm_epsilon.to_le_bytes())?;
        self.q_proj.write_to(w)?;
        self.k_proj.write_to(w)?;
        self.v_proj.write_to(w)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 13];
        r.read_exact(&mut head)?;
        if &head[0..4] != PARAMS_MAGIC {
            return Err(Error::Format("bad polar checkpoint magic".into()));
        }
        let border = BorderMode::from_code(head[4])?;
        let norm_epsilon = f64::from_le_bytes(head[5..13].try_into().unwrap());
        let q_proj = LinearProjection::read_from(r)?;
        let k_proj = LinearProjection::read_from(r)?;
        let v_proj = LinearProjection::read_from(r)?;
        if q_proj.in_channels != q_proj.out_channels
            || k_proj.in_channels != q_proj.in_channels
            || v_proj.in_channels != q_proj.in_channels
        {
            return Err(Error::Format("polar checkpoint projections are not CxC".into()));
        }
        Ok(Self {
            q_proj,
            k_proj,
            v_proj,
            norm_epsilon,
            border,
        })
    }
}

/// Pool the score matrix over the grid cells covered by `b` (image
/// coordinates, downsampling `scale`): `p_polar` is the mean over covered
/// cells and the eight non-center channels, `p_non_polar` the mean of the
/// center channel.
pub fn pool_polar_scores<T: Scalar>(
    pas: &PasMatrix<T>,
    b: &DetectionBox,
    scale: f64,
) -> Result<PolarScores> {
    let range = box_to_grid(b, scale, pas.height, pas.width)?;
    Ok(pool_over_range(pas, range))
}

pub fn pool_over_range<T: Scalar>(pas: &PasMatrix<T>, range: GridRange) -> PolarScores {
    let mut non_center = 0.0;
    let mut center = 0.0;
    for i in range.row0..=range.row1 {
        for j in range.col0..=range.col1 {
            for n in 0..9 {
                let v = pas.get(n, i, j).to_f64_lossy();
                if n == CENTER {
                    center += v;
                } else {
                    non_center += v;
                }
            }
        }
    }
    let cells = range.cell_count() as f64;
    PolarScores {
        p_polar: non_center / (8.0 * cells),
        p_non_polar: center / cells,
    }
}

/// Distribute score gradients back over the pooled cells.
pub fn pool_backward(
    range: GridRange,
    d_polar: f64,
    d_non_polar: f64,
    d_pas: &mut PasMatrix<f64>,
) {
    let cells = range.cell_count() as f64;
    let g_polar = d_polar / (8.0 * cells);
    let g_center = d_non_polar / cells;
    for i in range.row0..=range.row1 {
        for j in range.col0..=range.col1 {
            for n in 0..9 {
                if n == CENTER {
                    d_pas.add_at(n, i, j, g_center);
                } else {
                    d_pas.add_at(n, i, j, g_polar);
                }
            }
        }
    }
}

/// Cross entropy over the two pooled scores: the pair
/// `[p_non_polar, p_polar]` is softmax-normalized and the negative log of the
/// target entry is returned. Target `true` means the box is a polar ground
/// truth.
pub fn polarnet_loss(scores: &PolarScores, target_polar: bool) -> f64 {
    let (z0, z1) = (scores.p_non_polar, scores.p_polar);
    let m = z0.max(z1);
    let log_sum = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
    let z_t = if target_polar { z1 } else { z0 };
    log_sum - z_t
}

/// Loss and its gradients w.r.t. the two pooled scores.
pub fn polarnet_loss_backward(scores: &PolarScores, target_polar: bool) -> (f64, PolarScores) {
    let loss = polarnet_loss(scores, target_polar);
    let (z0, z1) = (scores.p_non_polar, scores.p_polar);
    let m = z0.max(z1);
    let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
    let sum = e0 + e1;
    let (sm0, sm1) = (e0 / sum, e1 / sum);
    let grad = PolarScores {
        p_non_polar: sm0 - if target_polar { 0.0 } else { 1.0 },
        p_polar: sm1 - if target_polar { 1.0 } else { 0.0 },
    };
    (loss, grad)
}

impl PolarAttention<f64> {
    /// Backward pass. `d_y` is the upstream gradient on the output features,
    /// `d_pas` the gradient accumulated on the score matrix (from pooled
    /// score losses). Parameter gradients accumulate into the projections;
    /// the input gradient is returned.
    pub fn backward(
        &mut self,
        x: &FeatureMap<f64>,
        fwd: &PolarForward<f64>,
        d_y: Option<&FeatureMap<f64>>,
        d_pas_ext: Option<&PasMatrix<f64>>,
    ) -> Result<PolarBackward> {
        let c_n = self.channels();
        if x.channels != c_n {
            return Err(Error::Dimension("backward: input channel mismatch".into()));
        }
        if fwd.y.height != x.height || fwd.y.width != x.width {
            return Err(Error::State("backward called with a stale forward cache".into()));
        }
        let (h, w) = (x.height, x.width);
        let border = self.border;

        // Norm backward: y = s / sqrt(sum_c s^2 + eps).
        let mut d_s = FeatureMap::zeros(c_n, h, w);
        if let Some(d_y) = d_y {
            if !d_y.same_shape(&fwd.y) {
                return Err(Error::Dimension("backward: d_y shape mismatch".into()));
            }
            for i in 0..h {
                for j in 0..w {
                    let mut sq = 0.0;
                    let mut dot = 0.0;
                    for c in 0..c_n {
                        let s = fwd.pre_norm.get(c, i, j);
                        sq += s * s;
                        dot += d_y.get(c, i, j) * s;
                    }
                    let denom = (sq + self.norm_epsilon).sqrt();
                    let denom3 = denom * denom * denom;
                    for c in 0..c_n {
                        let s = fwd.pre_norm.get(c, i, j);
                        d_s.set(c, i, j, d_y.get(c, i, j) / denom - s * dot / denom3);
                    }
                }
            }
        }

        // Weighted-sum backward: s[c,i,j] = sum_n pas[n,i,j] * (1 + v[c, nb(n)]).
        let mut d_pas = match d_pas_ext {
            Some(g) => {
                if g.height != h || g.width != w {
                    return Err(Error::Dimension("backward: d_pas shape mismatch".into()));
                }
                g.clone()
            }
            None => PasMatrix::zeros(h, w),
        };
        let mut d_v = FeatureMap::zeros(c_n, h, w);
        for i in 0..h {
            for j in 0..w {
                for n in 0..9 {
                    let coords = match border {
                        BorderMode::Zero => neighbor(i, j, n, h, w),
                        BorderMode::Replicate => Some(neighbor_clamped(i, j, n, h, w)),
                    };
                    let p = fwd.pas.get(n, i, j);
                    match coords {
                        Some((ni, nj)) => {
                            let mut acc = 0.0;
                            for c in 0..c_n {
                                let g = d_s.get(c, i, j);
                                acc += g * (1.0 + fwd.v.get(c, ni, nj));
                                d_v.add_at(c, ni, nj, g * p);
                            }
                            d_pas.add_at(n, i, j, acc);
                        }
                        None => {
                            let mut acc = 0.0;
                            for c in 0..c_n {
                                acc += d_s.get(c, i, j);
                            }
                            d_pas.add_at(n, i, j, acc);
                        }
                    }
                }
            }
        }

        // Softmax backward per position, then the dot-product logits.
        let mut d_logits = PasMatrix::zeros(h, w);
        let mut d_q = FeatureMap::zeros(c_n, h, w);
        let mut d_k = FeatureMap::zeros(c_n, h, w);
        for i in 0..h {
            for j in 0..w {
                let mut p = [0.0; 9];
                let mut g = [0.0; 9];
                for n in 0..9 {
                    p[n] = fwd.pas.get(n, i, j);
                    g[n] = d_pas.get(n, i, j);
                }
                let dl = softmax9_backward(&p, &g);
                for (n, &dn) in dl.iter().enumerate() {
                    d_logits.set(n, i, j, dn);
                    if dn == 0.0 {
                        continue;
                    }
                    let coords = match border {
                        BorderMode::Zero => neighbor(i, j, n, h, w),
                        BorderMode::Replicate => Some(neighbor_clamped(i, j, n, h, w)),
                    };
                    if let Some((ni, nj)) = coords {
                        for c in 0..c_n {
                            d_q.add_at(c, i, j, dn * fwd.k.get(c, ni, nj));
                            d_k.add_at(c, ni, nj, dn * fwd.q.get(c, i, j));
                        }
                    }
                }
            }
        }

        // Through the three projections back to the input.
        let mut d_input = project_backward(&mut self.q_proj, x, &d_q)?;
        let dk_x = project_backward(&mut self.k_proj, x, &d_k)?;
        let dv_x = project_backward(&mut self.v_proj, x, &d_v)?;
        d_input.axpy(1.0, &dk_x)?;
        d_input.axpy(1.0, &dv_x)?;
        Ok(PolarBackward { d_input, d_logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::ObjectClass;
    use crate::oracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, c: usize) -> PolarAttention<f64> {
        let mut p = PolarAttention::zeros(c);
        for proj in [&mut p.q_proj, &mut p.k_proj, &mut p.v_proj] {
            for w in proj.weight.iter_mut() {
                *w = rng.gen_range(-0.8..0.8);
            }
            for b in proj.bias.iter_mut() {
                *b = rng.gen_range(-0.3..0.3);
            }
        }
        p
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn constant_input_gives_uniform_interior_pas() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let params = random_params(&mut rng, 3);
        let x = FeatureMap::from_fn(3, 5, 5, |c, _, _| 0.3 + 0.2 * c as f64);
        let pas = params.compute_pas(&x).unwrap();
        for i in 1..4 {
            for j in 1..4 {
                for n in 0..9 {
                    assert!(
                        (pas.get(n, i, j) - 1.0 / 9.0).abs() < 1e-12,
                        "interior position ({i},{j}) channel {n}"
                    );
                }
            }
        }
    }

    #[test]
    fn single_cell_zero_input_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = random_params(&mut rng, 4);
        for proj in [&mut params.q_proj, &mut params.k_proj] {
            proj.bias.iter_mut().for_each(|b| *b = 0.0);
        }
        let x = FeatureMap::zeros(4, 1, 1);
        let pas = params.compute_pas(&x).unwrap();
        for n in 0..9 {
            assert!((pas.get(n, 0, 0) - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pas_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = random_params(&mut rng, 4);
        let x = random_map(&mut rng, 4, 5, 5);
        let pas = params.compute_pas(&x).unwrap();
        let reference = oracle::pas_naive(&params, &x);
        for k in 0..pas.data.len() {
            assert!((pas.data[k] - reference.data[k]).abs() < 1e-10);
        }
        assert!(pas.max_sum_deviation() < 1e-10);
    }

    #[test]
    fn pas_channel_mismatch_is_dimension_error() {
        let params = PolarAttention::<f64>::zeros(3);
        let x = FeatureMap::<f64>::zeros(4, 2, 2);
        assert!(matches!(params.compute_pas(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_values_give_unit_presum_and_inverse_sqrt_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut params = random_params(&mut rng, 4);
        params.v_proj.weight.iter_mut().for_each(|w| *w = 0.0);
        params.v_proj.bias.iter_mut().for_each(|b| *b = 0.0);
        let x = random_map(&mut rng, 4, 4, 4);
        let fwd = params.forward(&x).unwrap();
        for v in &fwd.pre_norm.data {
            assert!((v - 1.0).abs() < 1e-12);
        }
        let expect = 1.0 / (4.0f64).sqrt();
        for v in &fwd.y.data {
            assert!((v - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn one_hot_center_pas_reduces_to_identity_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let params = random_params(&mut rng, 3);
        let x = random_map(&mut rng, 3, 4, 4);
        let v = project(&params.v_proj, &x).unwrap();
        let mut pas = PasMatrix::zeros(4, 4);
        for i in 0..4 {
            for j in 0..4 {
                pas.set(CENTER, i, j, 1.0);
            }
        }
        let s = PolarAttention::weighted_sum(&v, &pas, BorderMode::Zero).unwrap();
        for c in 0..3 {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((s.get(c, i, j) - (1.0 + v.get(c, i, j))).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn weighted_features_match_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let params = random_params(&mut rng, 4);
        let x = random_map(&mut rng, 4, 5, 5);
        let pas = params.compute_pas(&x).unwrap();
        let y = params.weighted_features(&x, &pas).unwrap();
        let reference = oracle::weighted_features_naive(&params, &x, &pas);
        for k in 0..y.data.len() {
            assert!((y.data[k] - reference.data[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn replicate_border_matches_oracle_too() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut params = random_params(&mut rng, 3);
        params.border = BorderMode::Replicate;
        let x = random_map(&mut rng, 3, 4, 6);
        let pas = params.compute_pas(&x).unwrap();
        let reference = oracle::pas_naive(&params, &x);
        for k in 0..pas.data.len() {
            assert!((pas.data[k] - reference.data[k]).abs() < 1e-10);
        }
        let y = params.weighted_features(&x, &pas).unwrap();
        let y_ref = oracle::weighted_features_naive(&params, &x, &pas);
        for k in 0..y.data.len() {
            assert!((y.data[k] - y_ref.data[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn translation_equivariance_in_the_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let params = random_params(&mut rng, 3);
        let x = random_map(&mut rng, 3, 6, 6);
        // Shift down-right by one cell.
        let shifted = FeatureMap::from_fn(3, 6, 6, |c, i, j| {
            if i >= 1 && j >= 1 {
                x.get(c, i - 1, j - 1)
            } else {
                rng.gen_range(-1.5..1.5)
            }
        });
        let fwd = params.forward(&x).unwrap();
        let fwd_shifted = params.forward(&shifted).unwrap();
        // Positions whose full 3x3 neighborhood lies inside both the
        // original and the shifted map.
        for i in 1..4 {
            for j in 1..4 {
                for n in 0..9 {
                    assert_eq!(fwd.pas.get(n, i, j), fwd_shifted.pas.get(n, i + 1, j + 1));
                }
                for c in 0..3 {
                    assert_eq!(fwd.y.get(c, i, j), fwd_shifted.y.get(c, i + 1, j + 1));
                }
            }
        }
    }

    #[test]
    fn pooling_uniform_and_one_hot() {
        let mut pas = PasMatrix::zeros(8, 8);
        for n in 0..9 {
            for i in 0..8 {
                for j in 0..8 {
                    pas.set(n, i, j, 1.0 / 9.0);
                }
            }
        }
        let b = DetectionBox::new(100.0, 100.0, 80.0, 50.0, ObjectClass::Agc);
        let s = pool_polar_scores(&pas, &b, 32.0).unwrap();
        assert!((s.p_polar - 1.0 / 9.0).abs() < 1e-15);
        assert!((s.p_non_polar - 1.0 / 9.0).abs() < 1e-15);

        let mut one_hot = PasMatrix::zeros(8, 8);
        for i in 0..8 {
            for j in 0..8 {
                one_hot.set(CENTER, i, j, 1.0);
            }
        }
        let s = pool_polar_scores(&one_hot, &b, 32.0).unwrap();
        assert_eq!(s.p_polar, 0.0);
        assert_eq!(s.p_non_polar, 1.0);
    }

    #[test]
    fn pooling_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut pas = PasMatrix::zeros(6, 6);
        for v in pas.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        // Box covering rows 1..=2, cols 1..=3 on a 32px grid.
        let b = DetectionBox::new(80.0, 64.0, 90.0, 62.0, ObjectClass::Agc);
        let range = box_to_grid(&b, 32.0, 6, 6).unwrap();
        assert_eq!(range, GridRange { row0: 1, row1: 2, col0: 1, col1: 3 });
        let s = pool_polar_scores(&pas, &b, 32.0).unwrap();

        let mut non_center = 0.0;
        let mut center = 0.0;
        for i in 1..=2usize {
            for j in 1..=3usize {
                for n in 0..9 {
                    if n == CENTER {
                        center += pas.get(n, i, j);
                    } else {
                        non_center += pas.get(n, i, j);
                    }
                }
            }
        }
        assert!((s.p_polar - non_center / (8.0 * 6.0)).abs() < 1e-12);
        assert!((s.p_non_polar - center / 6.0).abs() < 1e-12);
    }

    #[test]
    fn pooled_scores_satisfy_simplex_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let params = random_params(&mut rng, 4);
        let x = random_map(&mut rng, 4, 8, 8);
        let pas = params.compute_pas(&x).unwrap();
        for _ in 0..20 {
            let b = DetectionBox::new(
                rng.gen_range(20.0..230.0),
                rng.gen_range(20.0..230.0),
                rng.gen_range(10.0..120.0),
                rng.gen_range(10.0..120.0),
                ObjectClass::Agc,
            );
            let s = pool_polar_scores(&pas, &b, 32.0).unwrap();
            assert!((8.0 * s.p_polar + s.p_non_polar - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn loss_symmetric_scores_give_ln_two() {
        let s = PolarScores { p_polar: 0.3, p_non_polar: 0.3 };
        assert!((polarnet_loss(&s, true) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((polarnet_loss(&s, false) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_softplus_of_margin() {
        // Frozen from ln(1 + exp(-0.8)) in 64-bit.
        let s = PolarScores { p_polar: 0.9, p_non_polar: 0.1 };
        assert!((polarnet_loss(&s, true) - 0.3711006659477777).abs() < 1e-12);
    }

    #[test]
    fn batch_of_both_classes_on_uniform_pas_means_ln_two() {
        let s = PolarScores { p_polar: 1.0 / 9.0, p_non_polar: 1.0 / 9.0 };
        let mean = (polarnet_loss(&s, true) + polarnet_loss(&s, false)) / 2.0;
        assert!((mean - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut params = random_params(&mut rng, 3);
        let x = random_map(&mut rng, 3, 4, 4);
        let fwd = params.forward(&x).unwrap();
        let back = params.backward(&x, &fwd, None, None).unwrap();
        assert!(params.q_proj.weight_grad.iter().all(|&g| g == 0.0));
        assert!(params.k_proj.weight_grad.iter().all(|&g| g == 0.0));
        assert!(params.v_proj.weight_grad.iter().all(|&g| g == 0.0));
        assert!(back.d_input.data.iter().all(|&g| g == 0.0));
    }

    /// Scalar loss used by the finite-difference check: the polar supervision
    /// loss on two boxes plus a fixed weighting of the output features.
    fn probe_loss(params: &PolarAttention<f64>, x: &FeatureMap<f64>, coeff: &FeatureMap<f64>) -> f64 {
        let fwd = params.forward(x).unwrap();
        let b_pos = DetectionBox::new(40.0, 40.0, 50.0, 30.0, ObjectClass::Agc);
        let b_neg = DetectionBox::new(80.0, 70.0, 40.0, 40.0, ObjectClass::Ngec);
        let s_pos = pool_polar_scores(&fwd.pas, &b_pos, 32.0).unwrap();
        let s_neg = pool_polar_scores(&fwd.pas, &b_neg, 32.0).unwrap();
        let mut loss = polarnet_loss(&s_pos, true) + polarnet_loss(&s_neg, false);
        for (yv, cv) in fwd.y.data.iter().zip(coeff.data.iter()) {
            loss += yv * cv;
        }
        loss
    }

    fn analytic_probe_grads(
        params: &PolarAttention<f64>,
        x: &FeatureMap<f64>,
        coeff: &FeatureMap<f64>,
    ) -> (PolarAttention<f64>, PolarBackward) {
        let mut p = params.clone();
        let fwd = p.forward(x).unwrap();
        let b_pos = DetectionBox::new(40.0, 40.0, 50.0, 30.0, ObjectClass::Agc);
        let b_neg = DetectionBox::new(80.0, 70.0, 40.0, 40.0, ObjectClass::Ngec);
        let mut d_pas = PasMatrix::zeros(x.height, x.width);
        for (b, target) in [(&b_pos, true), (&b_neg, false)] {
            let range = box_to_grid(b, 32.0, x.height, x.width).unwrap();
            let scores = pool_over_range(&fwd.pas, range);
            let (_, g) = polarnet_loss_backward(&scores, target);
            pool_backward(range, g.p_polar, g.p_non_polar, &mut d_pas);
        }
        let back = p.backward(x, &fwd, Some(coeff), Some(&d_pas)).unwrap();
        (p, back)
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for border in [BorderMode::Zero, BorderMode::Replicate] {
            let mut params = random_params(&mut rng, 3);
            params.border = border;
            let x = random_map(&mut rng, 3, 4, 4);
            let coeff = random_map(&mut rng, 3, 4, 4);
            let (with_grads, back) = analytic_probe_grads(&params, &x, &coeff);

            fn pick<'a>(p: &'a mut PolarAttention<f64>, idx: usize) -> &'a mut LinearProjection<f64> {
                match idx {
                    0 => &mut p.q_proj,
                    1 => &mut p.k_proj,
                    _ => &mut p.v_proj,
                }
            }
            let h = 1e-5;
            let mut worst: f64 = 0.0;
            for proj_idx in 0..3 {
                let n_w = params.q_proj.weight.len();
                for k in 0..n_w {
                    let mut plus = params.clone();
                    pick(&mut plus, proj_idx).weight[k] += h;
                    let mut minus = params.clone();
                    pick(&mut minus, proj_idx).weight[k] -= h;
                    let fd = (probe_loss(&plus, &x, &coeff) - probe_loss(&minus, &x, &coeff)) / (2.0 * h);
                    let a = match proj_idx {
                        0 => with_grads.q_proj.weight_grad[k],
                        1 => with_grads.k_proj.weight_grad[k],
                        _ => with_grads.v_proj.weight_grad[k],
                    };
                    worst = worst.max(oracle::grad_rel_error(a, fd));
                }
                for k in 0..params.q_proj.bias.len() {
                    let mut plus = params.clone();
                    pick(&mut plus, proj_idx).bias[k] += h;
                    let mut minus = params.clone();
                    pick(&mut minus, proj_idx).bias[k] -= h;
                    let fd = (probe_loss(&plus, &x, &coeff) - probe_loss(&minus, &x, &coeff)) / (2.0 * h);
                    let a = match proj_idx {
                        0 => with_grads.q_proj.bias_grad[k],
                        1 => with_grads.k_proj.bias_grad[k],
                        _ => with_grads.v_proj.bias_grad[k],
                    };
                    worst = worst.max(oracle::grad_rel_error(a, fd));
                }
            }
            for k in 0..x.data.len() {
                let mut plus = x.clone();
                plus.data[k] += h;
                let mut minus = x.clone();
                minus.data[k] -= h;
                let fd = (probe_loss(&params, &plus, &coeff) - probe_loss(&params, &minus, &coeff)) / (2.0 * h);
                worst = worst.max(oracle::grad_rel_error(back.d_input.data[k], fd));
            }
            assert!(worst < 1e-6, "max relative gradient error {worst} ({border:?})");
        }
    }

    #[test]
    fn logit_gradients_sum_to_zero_per_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let params = random_params(&mut rng, 3);
        let x = random_map(&mut rng, 3, 4, 4);
        let coeff = random_map(&mut rng, 3, 4, 4);
        let (_, back) = analytic_probe_grads(&params, &x, &coeff);
        for i in 0..4 {
            for j in 0..4 {
                let sum: f64 = (0..9).map(|n| back.d_logits.get(n, i, j)).sum();
                assert!(sum.abs() < 1e-9, "constant logit direction must have zero gradient");
            }
        }
    }

    #[test]
    fn params_checkpoint_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let params = random_params(&mut rng, 5);
        let mut buf = Vec::new();
        params.write_to(&mut buf).unwrap();
        let back = PolarAttention::<f64>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(params.q_proj.weight, back.q_proj.weight);
        assert_eq!(params.v_proj.bias, back.v_proj.bias);
        assert_eq!(params.border, back.border);
        assert_eq!(params.norm_epsilon, back.norm_epsilon);
    }

    #[test]
    fn pas_matrix_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let mut pas = PasMatrix::zeros(3, 4);
        for v in pas.data.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let mut buf = Vec::new();
        pas.write_to(&mut buf).unwrap();
        let back = PasMatrix::<f64>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(pas, back);
    }
}
