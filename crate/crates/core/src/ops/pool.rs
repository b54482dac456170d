//! 2x2/2/0 max pooling.

/// Forward pass. Odd trailing rows/columns are dropped (floor mode). Returns the pooled values
/// and, for each output, the flat input index that won. Ties go to the first element in scan
/// order (row-major within the window).
pub fn maxpool2_forward(
    input: &[f64],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + 2 * oy * w + 2 * ox;
                let mut best = input[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > best {
                        best = input[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &[f64], argmax: &[usize], input_len: usize) -> Vec<f64> {
    let mut d = vec![0.0; input_len];
    for (g, &i) in grad_out.iter().zip(argmax) {
        d[i] += g;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_go_to_first_scanned() {
        let (out, arg) = maxpool2_forward(&[5.0; 4], 1, 2, 2);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn floor_mode_drops_last_row() {
        let x: Vec<f64> = (0..9).map(f64::from).collect();
        let (out, _) = maxpool2_forward(&x, 1, 3, 3);
        assert_eq!(out, vec![4.0]);
    }
}
