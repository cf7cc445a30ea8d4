#include "advseg/losses.hpp"

#include <stdexcept>
#include <string>

namespace advseg {

Tensor expand_mask(const VoidMask& mask, std::size_t channels) {
    const std::size_t plane = mask.height * mask.width;
    std::vector<double> out(mask.batch * channels * plane);
    for (std::size_t b = 0; b < mask.batch; ++b)
        for (std::size_t c = 0; c < channels; ++c)
            std::copy_n(mask.values.begin() + b * plane, plane,
                        out.begin() + (b * channels + c) * plane);
    return Tensor({mask.batch, channels, mask.height, mask.width}, std::move(out));
}

namespace {

void require_mask_matches(const Tensor& t, const VoidMask& mask, std::string_view what) {
    if (t.rank() != 4 || t.dim(0) != mask.batch || t.dim(2) != mask.height ||
        t.dim(3) != mask.width) {
        throw std::invalid_argument(std::string(what) + ": tensor " + shape_to_string(t.shape()) +
                                    " does not match mask " + std::to_string(mask.batch) + "x" +
                                    std::to_string(mask.height) + "x" + std::to_string(mask.width));
    }
}

}  // namespace

Tensor apply_void_zeroing(const Tensor& prob, const VoidMask& mask) {
    require_mask_matches(prob, mask, "apply_void_zeroing");
    return mul(prob, expand_mask(mask, prob.dim(1)));
}

Tensor mce_loss(const Tensor& pred, const Tensor& target, const VoidMask& mask) {
    if (pred.shape() != target.shape()) {
        throw std::invalid_argument("mce_loss: prediction " + shape_to_string(pred.shape()) +
                                    " vs target " + shape_to_string(target.shape()));
    }
    require_mask_matches(pred, mask, "mce_loss");
    const Tensor weights = mul(target.detach(), expand_mask(mask, pred.dim(1)));
    return neg(sum(mul(log(clamp(pred, kProbClamp, 1.0 - kProbClamp)), weights)));
}

Tensor bce_loss(const Tensor& pred, int target) {
    if (target != 0 && target != 1) {
        throw std::invalid_argument("bce_loss: target must be 0 or 1, got " + std::to_string(target));
    }
    const Tensor p = clamp(pred, kProbClamp, 1.0 - kProbClamp);
    const Tensor nll = target == 1 ? neg(log(p)) : neg(log(add(neg(p), 1.0)));
    if (pred.numel() == 1) return sum(nll);
    if (pred.rank() == 4) {
        const double per_image = static_cast<double>(pred.numel() / pred.dim(0));
        return mul(sum(nll), 1.0 / per_image);
    }
    return mean(nll);
}

Tensor adversary_objective(const Tensor& adv_on_gt, const Tensor& adv_on_pred) {
    return add(bce_loss(adv_on_gt, 1), bce_loss(adv_on_pred, 0));
}

Tensor segmenter_objective(const Tensor& seg_out, const Tensor& target, const VoidMask& mask,
                           const Tensor& adv_on_pred, const ObjectiveConfig& cfg) {
    if (cfg.lambda < 0.0) throw std::invalid_argument("segmenter_objective: lambda < 0");
    Tensor loss = mce_loss(seg_out, target, mask);
    if (cfg.lambda == 0.0 || !adv_on_pred.defined()) return loss;
    if (cfg.modified_update) return add(loss, mul(bce_loss(adv_on_pred, 1), cfg.lambda));
    return sub(loss, mul(bce_loss(adv_on_pred, 0), cfg.lambda));
}

Tensor hybrid_loss(const Tensor& seg_out, const Tensor& target, const VoidMask& mask,
                   const Tensor& adv_on_gt, const Tensor& adv_on_pred, const ObjectiveConfig& cfg) {
    if (cfg.lambda < 0.0) throw std::invalid_argument("hybrid_loss: lambda < 0");
    const Tensor bracket = adversary_objective(adv_on_gt, adv_on_pred);
    return sub(mce_loss(seg_out, target, mask), mul(bracket, cfg.lambda));
}

}  // namespace advseg
