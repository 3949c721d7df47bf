use super::tensor::Tensor;
use super::ModelError;
use crate::rolls::Pianoroll;
use crate::scalar::Scalar;

/// The three BCE sums and their per-target normalizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_roll: f64,
    pub l_p: f64,
    pub l_i: f64,
    pub w_roll: f64,
    pub w_p: f64,
    pub w_i: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.w_roll * self.l_roll + self.w_p * self.l_p + self.w_i * self.l_i
    }

    /// Weighted terms, i.e. mean BCE per target.
    pub fn weighted(&self) -> [f64; 3] {
        [self.w_roll * self.l_roll, self.w_p * self.l_p, self.w_i * self.l_i]
    }
}

/// Numerically stable `-[y ln s(z) + (1-y) ln(1 - s(z))]`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Splits `g` equally across the positions of `zs` that attain the maximum.
fn route_max<T: Scalar>(zs: &[(usize, T)], zmax: T, g: f64, dz: &mut [T]) {
    let ties = zs.iter().filter(|(_, z)| *z == zmax).count();
    let share = T::from_f64_lossy(g / ties as f64);
    for &(i, z) in zs {
        if z == zmax {
            dz[i] += share;
        }
    }
}

/// Multitask objective over a batch of logits `(n, M, T, F)`.
///
/// `labels[s]` is the `F x T x M` roll of sample `s`; only frames below
/// `valid[s]` contribute. Marginal probabilities are max-marginals of the
/// per-cell sigmoids, and since the sigmoid is monotone they are the sigmoid
/// of the max logit, so gradients flow to the argmax cell.
pub fn multitask_loss<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[&Pianoroll],
    valid: &[usize],
) -> Result<(LossBreakdown, Tensor<T>), ModelError> {
    let [n, m, t, f] = logits.shape;
    if labels.len() != n || valid.len() != n {
        return Err(ModelError::Shape(format!("{n} samples but {} labels and {} masks", labels.len(), valid.len())));
    }
    for (s, y) in labels.iter().enumerate() {
        if (y.n_pitch(), y.n_frames(), y.n_instruments()) != (f, t, m) {
            return Err(ModelError::Shape(format!("labels {}x{}x{} vs logits {f}x{t}x{m}", y.n_pitch(), y.n_frames(), y.n_instruments())));
        }
        if !y.is_binary() {
            return Err(ModelError::Labels(format!("sample {s} has non-binary labels")));
        }
        if valid[s] > t {
            return Err(ModelError::Shape(format!("mask of {} frames exceeds {t}", valid[s])));
        }
    }
    let tv: usize = valid.iter().sum();
    if tv == 0 {
        return Err(ModelError::Labels("no valid frames".into()));
    }
    let w_roll = 1.0 / (f * tv * m) as f64;
    let w_p = 1.0 / (f * tv) as f64;
    let w_i = 1.0 / (m * tv) as f64;
    let (mut l_roll, mut l_p, mut l_i) = (0.0, 0.0, 0.0);
    let mut grad = Tensor::zeros(logits.shape);
    let plane = t * f;
    let mut cells: Vec<(usize, T)> = Vec::with_capacity(f.max(m));

    for s in 0..n {
        let z = logits.sample(s);
        let y = labels[s].data();
        let dz = &mut grad.data[s * m * plane..(s + 1) * m * plane];
        for ti in 0..valid[s] {
            for mi in 0..m {
                let base = mi * plane + ti * f;
                for fi in 0..f {
                    let (zz, yy) = (z[base + fi].to_f64_lossy(), y[base + fi] as f64);
                    l_roll += bce_with_logits(zz, yy);
                    dz[base + fi] += T::from_f64_lossy(w_roll * (sigmoid(zz) - yy));
                }
            }
            // pitch marginal: max over instruments
            for fi in 0..f {
                cells.clear();
                cells.extend((0..m).map(|mi| (mi * plane + ti * f + fi, z[mi * plane + ti * f + fi])));
                let zmax = cells.iter().map(|c| c.1).fold(T::neg_infinity(), T::max);
                let ymax = (0..m).any(|mi| y[mi * plane + ti * f + fi] > 0.0) as u8 as f64;
                l_p += bce_with_logits(zmax.to_f64_lossy(), ymax);
                route_max(&cells, zmax, w_p * (sigmoid(zmax.to_f64_lossy()) - ymax), dz);
            }
            // instrument marginal: max over pitches
            for mi in 0..m {
                let base = mi * plane + ti * f;
                cells.clear();
                cells.extend((0..f).map(|fi| (base + fi, z[base + fi])));
                let zmax = cells.iter().map(|c| c.1).fold(T::neg_infinity(), T::max);
                let ymax = y[base..base + f].iter().any(|v| *v > 0.0) as u8 as f64;
                l_i += bce_with_logits(zmax.to_f64_lossy(), ymax);
                route_max(&cells, zmax, w_i * (sigmoid(zmax.to_f64_lossy()) - ymax), dz);
            }
        }
    }
    Ok((LossBreakdown { l_roll, l_p, l_i, w_roll, w_p, w_i }, grad))
}
