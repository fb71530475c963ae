// ops.hpp — differentiable operations over tensor.hpp nodes.
//
// Shape conventions: 4D maps are (B, C, H, W) row-major; token and feature
// matrices are (rows, cols); vectors are rank-1. Every op validates shapes
// and throws std::invalid_argument on mismatch. Backward closures recompute
// cheap intermediates rather than caching large buffers.
#pragma once

#include <vector>

#include "regseg/tensor.hpp"

namespace regseg::nn {

// ---- elementwise ----------------------------------------------------------
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr divide(const NodePtr& a, const NodePtr& b);
NodePtr add_scalar(const NodePtr& x, double s);
NodePtr mul_scalar(const NodePtr& x, double s);
NodePtr neg(const NodePtr& x);
NodePtr vlog(const NodePtr& x);  // caller keeps values positive
NodePtr clamp_min(const NodePtr& x, double floor);
NodePtr gelu(const NodePtr& x);

// ---- reductions -----------------------------------------------------------
NodePtr sum_all(const NodePtr& x);   // -> {1}
NodePtr mean_all(const NodePtr& x);  // -> {1}
NodePtr rowsum(const NodePtr& x);    // (M,N) -> {M}
NodePtr colsum(const NodePtr& x);    // (M,N) -> {N}
NodePtr sum_spatial_per_class(const NodePtr& x);  // (B,C,H,W) -> (B,C)

// ---- shape ----------------------------------------------------------------
NodePtr reshape(const NodePtr& x, std::vector<int> shape);
NodePtr concat_channels(const NodePtr& a, const NodePtr& b);  // 4D, on C
NodePtr concat_cols(const NodePtr& a, const NodePtr& b);      // 2D, on N
NodePtr slice_batch(const NodePtr& x, int b);  // (B,C,H,W) -> (1,C,H,W)
NodePtr narrow_batch(const NodePtr& x, int b0, int count);  // samples [b0,b0+count)

// ---- matrix ---------------------------------------------------------------
NodePtr matmul(const NodePtr& a, const NodePtr& b);     // (M,K)·(K,N)
NodePtr matmul_nt(const NodePtr& a, const NodePtr& b);  // (M,K)·(N,K)ᵀ
NodePtr rowwise_dot(const NodePtr& a, const NodePtr& b);  // (M,N)² -> {M}
NodePtr logsumexp_rows(const NodePtr& x);                 // (M,N) -> {M}
/// x is `blocks` stacked (T,D) blocks; each becomes w·block, w is (T,T).
NodePtr apply_token_matrix(const NodePtr& x, const NodePtr& w, int blocks);
NodePtr add_bias_cols(const NodePtr& x, const NodePtr& b);  // (M,N) + {N}
NodePtr scale_cols(const NodePtr& x, const NodePtr& g);     // (M,N) ∘ {N}

// ---- image ----------------------------------------------------------------
/// w is (Cout, Cin·kh·kw) row-major over (cin, ky, kx); bias is {Cout}.
NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& bias,
               int kh, int kw, int stride, int pad);
NodePtr upsample_nearest2(const NodePtr& x);
/// (B,C,H,W) -> (B·T, C·p·p) with T = (H/p)·(W/p); rows ordered (b, gy, gx).
NodePtr extract_patches(const NodePtr& x, int p);
/// Exact inverse of extract_patches for the given geometry.
NodePtr patches_to_image(const NodePtr& x, int b, int c, int h, int w, int p);

// ---- normalization / softmax ---------------------------------------------
NodePtr softmax_channels(const NodePtr& x);  // (B,C,H,W), over C per pixel
NodePtr layer_norm_rows(const NodePtr& x, double eps = 1e-5);      // (M,N)
NodePtr layer_norm_channels(const NodePtr& x, double eps = 1e-5);  // over C
NodePtr scale_channels(const NodePtr& x, const NodePtr& g);     // {C}
NodePtr add_bias_channels(const NodePtr& x, const NodePtr& b);  // {C}
NodePtr l2_normalize_rows(const NodePtr& x, double eps = 1e-12);
NodePtr l2_normalize_channels(const NodePtr& x, double eps = 1e-12);

// ---- gather ---------------------------------------------------------------
struct GridLoc {
  int b = 0;
  int y = 0;
  int x = 0;
};
/// Rows of per-location channel vectors: (B,C,H,W) × locs -> (|locs|, C).
NodePtr gather_locations(const NodePtr& x, const std::vector<GridLoc>& locs);
/// labels has B·H·W entries in [0,C); result (B, H·W) of P[b, y_bp, p].
NodePtr gather_class_prob(const NodePtr& p, const std::vector<int>& labels);

}  // namespace regseg::nn
