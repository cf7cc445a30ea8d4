// Losses and the two players' objectives.
//
// Conventions: probability maps are N x C x H x W tensors; adversary outputs
// are N x 1 x h x w probability grids (or a single scalar). Per-image losses
// sum over pixels; batch objectives sum over images.

#pragma once

#include "advseg/label_map.hpp"
#include "advseg/tensor.hpp"

namespace advseg {

/// Probabilities are clamped into [kProbClamp, 1 - kProbClamp] before any log.
inline constexpr double kProbClamp = 1e-7;

struct ObjectiveConfig {
    double lambda = 1.0;
    /// Segmenter minimizes +lambda * bce(a(x, s(x)), 1) instead of
    /// -lambda * bce(a(x, s(x)), 0).
    bool modified_update = true;
};

/// Constant N x C x H x W tensor repeating the mask over channels.
Tensor expand_mask(const VoidMask& mask, std::size_t channels);

/// Zeroes every channel at void positions. The backward pass propagates zero
/// gradient there.
Tensor apply_void_zeroing(const Tensor& prob, const VoidMask& mask);

/// -sum_i sum_c mask_i * y_ic * ln(clamp(yhat_ic)), summed over pixels and images.
Tensor mce_loss(const Tensor& pred, const Tensor& target, const VoidMask& mask);

/// Binary cross-entropy against a hard target in {0, 1}.
///
/// A rank-4 N x 1 x h x w grid is averaged over grid positions per image and
/// summed over images; any other non-scalar shape is averaged over all
/// elements; a single value uses the formula directly.
Tensor bce_loss(const Tensor& pred, int target);

/// sum_n bce(a(x_n, y_n), 1) + bce(a(x_n, s(x_n)), 0).
/// Callers pass adversary outputs computed from detached segmenter outputs.
Tensor adversary_objective(const Tensor& adv_on_gt, const Tensor& adv_on_pred);

/// Cross-entropy plus the adversarial term, in modified or original form.
/// With lambda == 0 or an undefined adv_on_pred this is exactly mce_loss.
Tensor segmenter_objective(const Tensor& seg_out, const Tensor& target, const VoidMask& mask,
                           const Tensor& adv_on_pred, const ObjectiveConfig& cfg);

/// The full two-player loss: mce - lambda * [bce(gt, 1) + bce(pred, 0)].
/// Diagnostic only; training uses the split objectives.
Tensor hybrid_loss(const Tensor& seg_out, const Tensor& target, const VoidMask& mask,
                   const Tensor& adv_on_gt, const Tensor& adv_on_pred, const ObjectiveConfig& cfg);

}  // namespace advseg
