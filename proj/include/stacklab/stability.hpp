#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stacklab/evaluator.hpp"
#include "stacklab/language.hpp"
#include "stacklab/model.hpp"

namespace stacklab {

struct CurvePoint {
  double length = 0.0;  // sequence length T (bucket mean)
  double loss = 0.0;    // mean over sequences
  double se = 0.0;  // standard error of the mean
  std::size_t n = 0;
};
using LossCurve = std::vector<CurvePoint>;

/// Throws std::invalid_argument unless lengths strictly increase and every
/// value is finite and nonnegative.
void validate_curve(const LossCurve& curve);

/// Buckets sequences by floor(length / width); per-sequence value is the mean
/// per-symbol cross-entropy.
LossCurve loss_curve(const std::vector<SequenceResult>& results, double width);
/// Same bucketing with per-sequence accuracy at determined targets; sequences
/// without determined targets are left out.
LossCurve accuracy_curve(const std::vector<SequenceResult>& results, double width);

/// CSV with header length,loss,stderr,n.
LossCurve read_curve_csv(const std::filesystem::path& path);
void write_curve_csv(const std::filesystem::path& path, const LossCurve& curve);

struct BoundCheck {
  bool pass = true;
  std::optional<double> worst_length;  // first point attaining the max loss above C
  double max_loss = 0.0;
};
BoundCheck error_bound_check(const LossCurve& curve, double bound);

/// Unbiased sample variance of bucket means; needs >= 2 buckets.
double variance_across_lengths(const LossCurve& curve);

enum class Growth { sublinear_or_linear, superlinear, inconclusive };
std::string_view to_string(Growth g);

struct GrowthFit {
  double a = 0.0, b = 0.0, c = 0.0;  // loss ~ a * T^b + c, a >= 0, c >= 0
  double residual = 0.0;             // weighted sum of squared residuals
  double b_low = 0.0, b_high = 0.0;  // bootstrap percentile interval
  bool converged = true;
  bool constant = false;  // power term not significant; a = b = 0
  Growth growth = Growth::inconclusive;
};

struct FitOptions {
  std::size_t bootstrap = 200;
  std::uint64_t seed = 0;
  double b_min = -4.0;
  double b_max = 8.0;
  double alpha = 0.01;  // F-test level for keeping the power term
};

/// Weighted least squares for the power-law-plus-constant model, with weights
/// 1/se^2 when every point has se > 0, otherwise iterated relative weights
/// 1/fitted^2 (noise proportional to the loss). For each exponent the
/// amplitude and offset are solved in closed form under a, c >= 0; the
/// exponent is searched on a grid (seeded by the log-log slope) and refined by
/// golden section. A fit whose exponent lands on the search boundary is
/// reported non-converged, with b = NaN.
GrowthFit growth_fit(const LossCurve& curve, const FitOptions& options = {});

struct Degradation {
  double loss_ratio = 1.0;  // mean CE long / short
  double retention = 1.0;   // accuracy long / short
  bool flagged = false;     // retention < threshold
};
Degradation degradation_ratio(const BinMetrics& short_bin, const BinMetrics& long_bin,
                              double threshold = 0.9);

struct Equivalence {
  bool equivalent = false;
  double difference = 0.0;  // longest bucket, model - reference
  double pooled_se = 0.0;
  std::vector<double> effect_sizes;  // per bucket difference / pooled se
};
/// Equivalent iff the longest-bucket difference is within 2 pooled standard errors.
Equivalence random_equivalence_test(const LossCurve& model, const LossCurve& reference);

struct PerturbationOptions {
  std::size_t flips = 1;
  std::uint64_t seed = 0;
  bool exhaustive = false;  // average over every single-flip variant instead
};
struct Perturbation {
  double mean_abs_delta = 0.0;  // |change in mean per-symbol CE|
  double max_abs_delta = 0.0;
  std::size_t scored = 0;
  std::size_t skipped = 0;  // strings with too few first-half content positions
};

/// Per-target cross-entropy (EOS last).
std::vector<double> target_losses(const SequenceScorer& scorer, const LanguageTask& task,
                                  std::span<const int> s);

Perturbation perturbation_robustness(const SequenceScorer& scorer, const LanguageTask& task,
                                     const std::vector<Sequence>& strings,
                                     const PerturbationOptions& options = {});

struct Agreement {
  double rate = 0.0;
  std::size_t constrained = 0;
  std::size_t matches = 0;
};
/// Argmax of the first stack's action distribution against the task profile at
/// constrained positions; ties are broken uniformly at random. `only` limits
/// scoring to one expected action.
Agreement stack_action_agreement(const SequenceScorer& scorer, const LanguageTask& task,
                                 const std::vector<Sequence>& strings, std::uint64_t seed = 0,
                                 std::optional<ExpectedAction> only = std::nullopt);

struct Window {
  bool empty = true;
  std::size_t first = 0, last = 0;  // bucket indices, inclusive
  double t_low = 0.0, t_high = 0.0;
};
/// Longest run of buckets with mean(A) + se(A) < mean(B) - se(B); earliest on ties.
Window advantage_window(const LossCurve& a, const LossCurve& b);

/// Largest T such that every point up to T has loss within 10% of `reference`.
std::optional<double> detect_delta_t(const LossCurve& curve, double reference,
                                     double tolerance = 0.1);

enum class Verdict { stable, unstable, inconclusive };
std::string_view to_string(Verdict v);

/// stable iff b <= 1 + tolerance and retention >= threshold; inconclusive when
/// the fit did not converge.
Verdict decide_verdict(const GrowthFit& fit, const Degradation& degradation,
                       double b_tolerance = 0.1);

struct OrderingCheck {
  bool asserted = false;  // only when the fully trained model is stable
  bool holds = true;
  std::string note;
};
OrderingCheck ordering_check(Verdict full_verdict, double full_bin0_loss,
                             const std::vector<std::pair<std::string, double>>& frozen_bin0_losses);

struct StabilityReport {
  double bound_c = 0.0;  // max observed loss
  bool within_bound = true;
  double bound = 0.0;
  LossCurve curve;
  std::vector<double> variance_profile;  // bucket means
  double variance = 0.0;
  GrowthFit growth;
  Degradation degradation;
  std::optional<Perturbation> perturbation;
  std::optional<Equivalence> random_equivalence;
  std::optional<Agreement> stack_agreement;
  std::optional<Window> advantage;
  std::optional<double> delta_t;
  Verdict verdict = Verdict::inconclusive;
};

nlohmann::json to_json(const StabilityReport& report);
StabilityReport stability_report_from_json(const nlohmann::json& j);

}  // namespace stacklab
