//! Per-channel batch normalization over `[N, C, H, W]`.

/// Added to the variance before the square root.
pub const BN_EPSILON: f64 = 1e-5;
/// Retention factor of the running statistics: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Statistics of one training-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance (what the normalization divides by).
    pub var: Vec<f64>,
    /// Number of values reduced per channel.
    pub count: usize,
}

impl BatchStats {
    /// Folds these statistics into running estimates. The running variance uses the unbiased
    /// estimate.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64]) {
        let m = self.count as f64;
        let correction = if self.count > 1 { m / (m - 1.0) } else { 1.0 };
        for c in 0..self.mean.len() {
            running_mean[c] = BN_MOMENTUM * running_mean[c] + (1.0 - BN_MOMENTUM) * self.mean[c];
            running_var[c] =
                BN_MOMENTUM * running_var[c] + (1.0 - BN_MOMENTUM) * self.var[c] * correction;
        }
    }
}

pub struct Dims {
    pub n: usize,
    pub c: usize,
    pub plane: usize,
}

fn for_channel(d: &Dims, c: usize, mut f: impl FnMut(usize)) {
    for n in 0..d.n {
        let base = (n * d.c + c) * d.plane;
        for i in base..base + d.plane {
            f(i);
        }
    }
}

pub fn batch_stats(x: &[f64], d: &Dims) -> BatchStats {
    let m = (d.n * d.plane) as f64;
    let mut mean = vec![0.0; d.c];
    let mut var = vec![0.0; d.c];
    for c in 0..d.c {
        let mut s = 0.0;
        for_channel(d, c, |i| s += x[i]);
        let mu = s / m;
        let mut v = 0.0;
        for_channel(d, c, |i| v += (x[i] - mu) * (x[i] - mu));
        mean[c] = mu;
        var[c] = v / m;
    }
    BatchStats {
        mean,
        var,
        count: d.n * d.plane,
    }
}

/// Normalizes with the given per-channel mean/variance. Returns `(output, x_hat, inv_std)`.
pub fn normalize(
    x: &[f64],
    d: &Dims,
    mean: &[f64],
    var: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for c in 0..d.c {
        for_channel(d, c, |i| {
            xhat[i] = (x[i] - mean[c]) * inv_std[c];
            out[i] = gamma[c] * xhat[i] + beta[c];
        });
    }
    (out, xhat, inv_std)
}

/// Backward through normalization. With `batch_statistics` the mean and variance are treated as
/// functions of the input (training mode); otherwise they are constants (evaluation mode).
/// Returns `(d_x, d_gamma, d_beta)`.
pub fn backward(
    grad_out: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    d: &Dims,
    batch_statistics: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = (d.n * d.plane) as f64;
    let mut dx = vec![0.0; grad_out.len()];
    let mut dgamma = vec![0.0; d.c];
    let mut dbeta = vec![0.0; d.c];
    for c in 0..d.c {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        for_channel(d, c, |i| {
            sum_dy += grad_out[i];
            sum_dy_xhat += grad_out[i] * xhat[i];
        });
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let g = gamma[c] * inv_std[c];
        if batch_statistics {
            for_channel(d, c, |i| {
                dx[i] = g * (grad_out[i] - sum_dy / m - xhat[i] * sum_dy_xhat / m);
            });
        } else {
            for_channel(d, c, |i| dx[i] = g * grad_out[i]);
        }
    }
    (dx, dgamma, dbeta)
}
