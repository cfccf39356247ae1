//! Analytic multiply-accumulate counts for the forward pass.
//!
//! Counting convention: one MAC per multiply in convolutions, matrix
//! contractions, linear layers, normalization affines, and elementwise
//! gating products. Pure additions (residual sums, bias adds) and
//! transcendental evaluations (softmax, activations) count zero.

/// `k * (c_in / groups) * c_out * l_out`.
pub fn conv1d_macs(c_in: usize, c_out: usize, k: usize, groups: usize, l_out: usize) -> u64 {
    (k * (c_in / groups) * c_out * l_out) as u64
}

/// Kernel-1 projection followed by a depthwise kernel-3 conv.
pub fn projection_macs(c_in: usize, c_out: usize, l: usize) -> u64 {
    conv1d_macs(c_in, c_out, 1, 1, l) + conv1d_macs(c_out, c_out, 3, c_out, l)
}

/// Temporal sparse attention on a `[C, L]` input: three projections, the
/// L×L score contraction, and the value mixdown. Quadratic in `L`, linear
/// in `C` for the dominant terms.
pub fn tssa_macs(c: usize, l: usize) -> u64 {
    3 * projection_macs(c, c, l) + 2 * (c * l * l) as u64
}

/// Gated convolutional unit with hidden width `h` on a `[C, L]` input.
pub fn gcu_macs(c: usize, h: usize, l: usize) -> u64 {
    conv1d_macs(c, h, 1, 1, l)          // gate projection
        + conv1d_macs(h, h, 3, h, l)    // gate depthwise
        + conv1d_macs(c, h, 1, 1, l)    // value projection
        + tssa_macs(h, l)
        + (h * l) as u64                // gating product
        + conv1d_macs(h, c, 1, 1, l)    // output projection
}

/// Multi-branch block: kernel-3 conv, kernel-1 conv, and normalization
/// affines (2 multiplies per element per normalized branch).
pub fn repblock_train_macs(c_in: usize, c_out: usize, l_out: usize, norm_branches: usize) -> u64 {
    conv1d_macs(c_in, c_out, 3, 1, l_out)
        + conv1d_macs(c_in, c_out, 1, 1, l_out)
        + (norm_branches * 2 * c_out * l_out) as u64
}

pub fn repblock_fused_macs(c_in: usize, c_out: usize, l_out: usize) -> u64 {
    conv1d_macs(c_in, c_out, 3, 1, l_out)
}

/// Fully-connected stack over a pooled feature vector.
pub fn mlp_macs(dims: &[usize]) -> u64 {
    dims.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_macs_formula() {
        // K * C_in * C_out * L_out
        assert_eq!(conv1d_macs(1, 1, 3, 1, 4), 12);
        assert_eq!(conv1d_macs(4, 8, 3, 1, 10), 960);
        // depthwise divides by groups
        assert_eq!(conv1d_macs(4, 4, 3, 4, 10), 120);
    }

    #[test]
    fn tssa_quadruples_when_length_doubles() {
        let c = 4;
        let (l1, l2) = (256, 512);
        let ratio = tssa_macs(c, l2) as f64 / tssa_macs(c, l1) as f64;
        assert!((3.8..=4.2).contains(&ratio), "ratio = {}", ratio);
    }

    #[test]
    fn tssa_scales_linearly_in_channels_for_dominant_terms() {
        // At fixed large L, the quadratic terms are 2*C*L^2.
        let l = 4096;
        let r = tssa_macs(8, l) as f64 / tssa_macs(4, l) as f64;
        assert!((r - 2.0).abs() < 0.1, "ratio = {}", r);
    }

    #[test]
    fn mlp_macs_sum_products() {
        assert_eq!(mlp_macs(&[256, 512, 2]), 256 * 512 + 512 * 2);
    }
}
