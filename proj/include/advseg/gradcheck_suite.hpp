// Finite-difference checks of every differentiable op, loss, encoding and an
// end-to-end segmenter + adversary composition.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace advseg {

inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr double kGradCheckStep = 1e-5;

struct GradCheckCase {
    std::string group;  // "op", "loss", "encoding" or "end_to_end"
    std::string name;
    double max_rel_error = 0.0;
    bool passed() const { return max_rel_error < kGradCheckTolerance; }
};

/// Deterministic in `seed`. Op cases are named after op_name().
std::vector<GradCheckCase> run_gradcheck_suite(std::uint64_t seed = 7);

bool all_passed(const std::vector<GradCheckCase>& cases);

void write_gradcheck_table(std::ostream& out, const std::vector<GradCheckCase>& cases);

}  // namespace advseg
