#include "stacklab/stability.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "stacklab/checkpoint.hpp"

namespace stacklab {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct Stats {
  double mean = 0.0;
  double se = 0.0;
};

Stats mean_se(const std::vector<double>& v) {
  Stats s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.se = std::sqrt(ss / double(v.size() - 1) / double(v.size()));
  }
  return s;
}

template <typename Value>
LossCurve bucketed(const std::vector<SequenceResult>& results, double width, Value value) {
  if (!(width > 0.0)) throw std::invalid_argument("bucket width must be positive");
  std::map<long long, std::pair<std::vector<double>, std::vector<double>>> buckets;
  for (const auto& r : results) {
    const auto v = value(r);
    if (!v) continue;
    auto& [lengths, values] = buckets[(long long)std::floor(double(r.length) / width)];
    lengths.push_back(double(r.length));
    values.push_back(*v);
  }
  LossCurve curve;
  for (auto& [key, lv] : buckets) {
    const Stats s = mean_se(lv.second);
    curve.push_back({mean_se(lv.first).mean, s.mean, s.se, lv.second.size()});
  }
  return curve;
}

}  // namespace

void validate_curve(const LossCurve& curve) {
  for (std::size_t i = 0; i < curve.size(); ++i) {
    const auto& p = curve[i];
    if (!std::isfinite(p.length) || !std::isfinite(p.loss) || !std::isfinite(p.se))
      throw std::invalid_argument("curve point " + std::to_string(i) + " is not finite");
    if (p.loss < 0.0 || p.se < 0.0)
      throw std::invalid_argument("curve point " + std::to_string(i) + " is negative");
    if (i > 0 && !(p.length > curve[i - 1].length))
      throw std::invalid_argument("curve lengths must strictly increase (point " +
                                  std::to_string(i) + ")");
  }
}

LossCurve loss_curve(const std::vector<SequenceResult>& results, double width) {
  return bucketed(results, width, [](const SequenceResult& r) -> std::optional<double> {
    if (r.targets == 0) return std::nullopt;
    return r.total_ce / double(r.targets);
  });
}

LossCurve accuracy_curve(const std::vector<SequenceResult>& results, double width) {
  return bucketed(results, width, [](const SequenceResult& r) -> std::optional<double> {
    if (r.determined == 0) return std::nullopt;
    return double(r.correct) / double(r.determined);
  });
}

LossCurve read_curve_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open curve file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "length,loss,stderr,n")
    throw std::invalid_argument(path.string() + ": expected header length,loss,stderr,n");
  LossCurve curve;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream row(line);
    CurvePoint p;
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(row >> p.length >> c1 >> p.loss >> c2 >> p.se >> c3 >> p.n) || c1 != ',' ||
        c2 != ',' || c3 != ',')
      throw std::invalid_argument(path.string() + ": malformed line " + std::to_string(lineno));
    curve.push_back(p);
  }
  validate_curve(curve);
  return curve;
}

void write_curve_csv(const std::filesystem::path& path, const LossCurve& curve) {
  std::ostringstream out;
  out.precision(17);
  out << "length,loss,stderr,n\n";
  for (const auto& p : curve) out << p.length << ',' << p.loss << ',' << p.se << ',' << p.n << '\n';
  write_file_atomic(path, out.str());
}

BoundCheck error_bound_check(const LossCurve& curve, double bound) {
  validate_curve(curve);
  BoundCheck check;
  double worst = 0.0;
  for (const auto& p : curve) {
    check.max_loss = std::max(check.max_loss, p.loss);
    if (p.loss > bound && (!check.worst_length || p.loss > worst))
      check.worst_length = p.length, worst = p.loss;
  }
  check.pass = !check.worst_length;
  return check;
}

double variance_across_lengths(const LossCurve& curve) {
  validate_curve(curve);
  if (curve.size() < 2) throw std::invalid_argument("variance needs at least two buckets");
  std::vector<double> v;
  for (const auto& p : curve) v.push_back(p.loss);
  const Stats s = mean_se(v);
  return s.se * s.se * double(v.size());
}

std::string_view to_string(Growth g) {
  switch (g) {
    case Growth::sublinear_or_linear: return "sublinear_or_linear";
    case Growth::superlinear: return "superlinear";
    case Growth::inconclusive: return "inconclusive";
  }
  return "?";
}

namespace {

struct Fixed {
  double a = 0.0, c = 0.0, sse = 0.0;
};

// Best (a, c) >= 0 for y ~ a x^b + c at a fixed exponent, weighted least squares.
Fixed fit_fixed(const std::vector<double>& x, const std::vector<double>& y,
                const std::vector<double>& w, double b) {
  const std::size_t n = x.size();
  std::vector<double> f(n);
  for (std::size_t i = 0; i < n; ++i) f[i] = std::pow(x[i], b);
  auto sse = [&](double a, double c) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += w[i] * (y[i] - a * f[i] - c) * (y[i] - a * f[i] - c);
    return s;
  };
  double sw = 0, sf = 0, sy = 0, sff = 0, sfy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sw += w[i];
    sf += w[i] * f[i];
    sy += w[i] * y[i];
    sff += w[i] * f[i] * f[i];
    sfy += w[i] * f[i] * y[i];
  }
  const double det = sw * sff - sf * sf;
  Fixed best{0.0, std::max(0.0, sy / sw), 0.0};
  best.sse = sse(best.a, best.c);
  if (det > 1e-12 * sw * sff) {
    const double a = (sw * sfy - sf * sy) / det;
    const double c = (sy - a * sf) / sw;
    if (a >= 0.0 && c >= 0.0) return {a, c, sse(a, c)};
  }
  if (sff > 0.0) {
    const double a = std::max(0.0, sfy / sff);
    const double s = sse(a, 0.0);
    if (s < best.sse) best = {a, 0.0, s};
  }
  return best;
}

struct RawFit {
  double a = 0.0, b = 0.0, c = 0.0, sse = 0.0;
  bool converged = true;
  bool constant = false;
};

double f_critical(std::size_t df2, double alpha) {
  // Upper alpha quantile of F(2, df2), closed form for two numerator dof.
  const double d = double(df2);
  return d / 2.0 * (std::pow(alpha, -2.0 / d) - 1.0);
}

RawFit fit_raw(const std::vector<double>& lengths, const std::vector<double>& y,
               const std::vector<double>& w, const FitOptions& opt) {
  const std::size_t n = lengths.size();
  const double t_max = *std::max_element(lengths.begin(), lengths.end());
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = lengths[i] / t_max;

  double sw = 0.0, swy = 0.0;
  for (std::size_t i = 0; i < n; ++i) sw += w[i], swy += w[i] * y[i];
  const double mean = swy / sw;
  double sse0 = 0.0;
  for (std::size_t i = 0; i < n; ++i) sse0 += w[i] * (y[i] - mean) * (y[i] - mean);

  constexpr double step = 0.05;
  std::vector<double> grid;
  for (double b = opt.b_min; b <= opt.b_max + 1e-12; b += step) grid.push_back(b);
  // Log-log slope as an extra starting candidate.
  {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    std::size_t m = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (y[i] <= 0.0) continue;
      const double lx = std::log(lengths[i]), ly = std::log(y[i]);
      sx += lx, sy += ly, sxx += lx * lx, sxy += lx * ly, ++m;
    }
    const double den = double(m) * sxx - sx * sx;
    if (m >= 2 && den > 0.0) {
      const double slope = (double(m) * sxy - sx * sy) / den;
      if (slope > opt.b_min && slope < opt.b_max) grid.push_back(slope);
    }
  }
  double best_b = grid.front();
  double best_sse = std::numeric_limits<double>::infinity();
  for (double b : grid) {
    const double s = fit_fixed(x, y, w, b).sse;
    if (s < best_sse) best_sse = s, best_b = b;
  }
  double lo = std::max(opt.b_min, best_b - step), hi = std::min(opt.b_max, best_b + step);
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double m1 = hi - phi * (hi - lo), m2 = lo + phi * (hi - lo);
  double f1 = fit_fixed(x, y, w, m1).sse, f2 = fit_fixed(x, y, w, m2).sse;
  while (hi - lo > 1e-10) {
    if (f1 <= f2) {
      hi = m2, m2 = m1, f2 = f1;
      m1 = hi - phi * (hi - lo);
      f1 = fit_fixed(x, y, w, m1).sse;
    } else {
      lo = m1, m1 = m2, f1 = f2;
      m2 = lo + phi * (hi - lo);
      f2 = fit_fixed(x, y, w, m2).sse;
    }
  }
  double b = (lo + hi) / 2.0;
  Fixed fixed = fit_fixed(x, y, w, b);
  if (best_sse < fixed.sse) b = best_b, fixed = fit_fixed(x, y, w, b);

  RawFit fit;
  fit.sse = fixed.sse;
  const bool improves = sse0 > 0.0 && fixed.sse < sse0 && fixed.a > 0.0;
  bool significant = false;
  if (improves) {
    const double f_stat = fixed.sse <= sse0 * 1e-24
                              ? std::numeric_limits<double>::infinity()
                              : ((sse0 - fixed.sse) / 2.0) / (fixed.sse / double(n - 3));
    significant = f_stat > f_critical(n - 3, opt.alpha);
  }
  if (!significant) {
    fit.constant = true;
    fit.c = std::max(0.0, mean);
    fit.sse = sse0;
    return fit;
  }
  const double edge = 1e-6;
  if (!std::isfinite(fixed.sse) || b <= opt.b_min + edge || b >= opt.b_max - edge) {
    fit.converged = false;
    fit.b = kNaN;
    return fit;
  }
  fit.b = b;
  fit.a = fixed.a / std::pow(t_max, b);
  fit.c = fixed.c;
  return fit;
}

double percentile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * double(v.size() - 1);
  const std::size_t i = std::size_t(pos);
  if (i + 1 >= v.size()) return v.back();
  return v[i] + (pos - double(i)) * (v[i + 1] - v[i]);
}

std::vector<double> relative_weights(const std::vector<double>& scale) {
  const double top = *std::max_element(scale.begin(), scale.end());
  const double floor = top > 0.0 ? 1e-3 * top : 1.0;
  std::vector<double> w;
  for (double v : scale) w.push_back(1.0 / (std::max(v, floor) * std::max(v, floor)));
  return w;
}

// With per-point standard errors the fit is inverse-variance weighted.
// Without them the noise is taken as proportional to the mean: weights start at
// 1/y^2 and are then refit against the fitted curve, which removes the bias of
// weighting by the noisy observations themselves.
RawFit fit_curve(const std::vector<double>& t, const std::vector<double>& y,
                 const std::vector<double>& se, const FitOptions& opt) {
  if (std::all_of(se.begin(), se.end(), [](double v) { return v > 0.0; })) {
    std::vector<double> w;
    for (double v : se) w.push_back(1.0 / (v * v));
    return fit_raw(t, y, w, opt);
  }
  RawFit fit = fit_raw(t, y, relative_weights(y), opt);
  for (int round = 0; round < 4 && fit.converged; ++round) {
    std::vector<double> predicted;
    for (double x : t) predicted.push_back(fit.constant ? fit.c : fit.a * std::pow(x, fit.b) + fit.c);
    fit = fit_raw(t, y, relative_weights(predicted), opt);
  }
  return fit;
}

}  // namespace

GrowthFit growth_fit(const LossCurve& curve, const FitOptions& options) {
  validate_curve(curve);
  if (curve.size() < 4) throw std::invalid_argument("growth fit needs at least four points");
  if (!(options.b_min < options.b_max)) throw std::invalid_argument("empty exponent range");
  std::vector<double> t, y;
  for (const auto& p : curve) t.push_back(p.length), y.push_back(p.loss);
  std::vector<double> se;
  for (const auto& p : curve) se.push_back(p.se);
  const RawFit raw = fit_curve(t, y, se, options);

  GrowthFit fit;
  fit.a = raw.a, fit.b = raw.b, fit.c = raw.c, fit.residual = raw.sse;
  fit.converged = raw.converged;
  fit.constant = raw.constant;
  fit.b_low = fit.b_high = fit.b;
  if (!fit.converged) {
    fit.growth = Growth::inconclusive;
    return fit;
  }

  std::vector<double> boot;
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<std::size_t> pick(0, curve.size() - 1);
  for (std::size_t r = 0; r < options.bootstrap; ++r) {
    std::vector<double> bt, by, bs;
    for (int attempt = 0; attempt < 50; ++attempt) {
      bt.clear(), by.clear(), bs.clear();
      std::set<double> distinct;
      for (std::size_t i = 0; i < curve.size(); ++i) {
        const std::size_t k = pick(rng);
        bt.push_back(t[k]), by.push_back(y[k]), bs.push_back(se[k]);
        distinct.insert(t[k]);
      }
      if (distinct.size() >= 4) break;
      bt.clear();
    }
    if (bt.empty()) continue;
    const RawFit f = fit_curve(bt, by, bs, options);
    if (f.converged) boot.push_back(f.b);
  }
  if (!boot.empty()) {
    fit.b_low = percentile(boot, 0.025);
    fit.b_high = percentile(boot, 0.975);
  }
  fit.growth = fit.b_low > 1.0 ? Growth::superlinear : Growth::sublinear_or_linear;
  return fit;
}

Degradation degradation_ratio(const BinMetrics& short_bin, const BinMetrics& long_bin,
                              double threshold) {
  if (short_bin.targets == 0 || long_bin.targets == 0)
    throw std::invalid_argument("degradation ratio needs scored targets in both bins");
  Degradation d;
  const double ls = short_bin.total_ce / double(short_bin.targets);
  const double ll = long_bin.total_ce / double(long_bin.targets);
  d.loss_ratio = ls > 0.0 ? ll / ls : kNaN;
  d.retention = short_bin.accuracy > 0.0 ? long_bin.accuracy / short_bin.accuracy : kNaN;
  d.flagged = std::isfinite(d.retention) && d.retention < threshold;
  return d;
}

Equivalence random_equivalence_test(const LossCurve& model, const LossCurve& reference) {
  validate_curve(model);
  validate_curve(reference);
  if (model.empty() || model.size() != reference.size())
    throw std::invalid_argument("random-equivalence curves must share buckets");
  Equivalence e;
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (std::abs(model[i].length - reference[i].length) > 1e-9 * std::max(1.0, model[i].length))
      throw std::invalid_argument("random-equivalence curves disagree on bucket " +
                                  std::to_string(i) + " length");
    const double diff = model[i].loss - reference[i].loss;
    const double se = std::hypot(model[i].se, reference[i].se);
    e.effect_sizes.push_back(se > 0.0 ? diff / se
                                      : (diff == 0.0 ? 0.0 : std::copysign(INFINITY, diff)));
    e.difference = diff;
    e.pooled_se = se;
  }
  e.equivalent = std::abs(e.difference) <= 2.0 * e.pooled_se;
  return e;
}

std::vector<double> target_losses(const SequenceScorer& scorer, const LanguageTask& task,
                                  std::span<const int> s) {
  const SequenceScores scores = scorer.score(s);
  std::vector<double> out;
  for (std::size_t t = 0; t <= s.size(); ++t) {
    const auto& l = scores.logits.at(t);
    const std::size_t target = t < s.size() ? std::size_t(s[t]) : task.eos();
    const double m = *std::max_element(l.begin(), l.end());
    double z = 0.0;
    for (double v : l) z += std::exp(v - m);
    out.push_back(m + std::log(z) - l.at(target));
  }
  return out;
}

namespace {

double mean_loss(const SequenceScorer& scorer, const LanguageTask& task, std::span<const int> s) {
  const auto l = target_losses(scorer, task, s);
  return std::accumulate(l.begin(), l.end(), 0.0) / double(l.size());
}

}  // namespace

Perturbation perturbation_robustness(const SequenceScorer& scorer, const LanguageTask& task,
                                     const std::vector<Sequence>& strings,
                                     const PerturbationOptions& options) {
  Perturbation p;
  std::mt19937_64 rng(options.seed);
  double total = 0.0;
  auto record = [&](double base, const Sequence& variant) {
    const double d = std::abs(mean_loss(scorer, task, variant) - base);
    total += d;
    p.max_abs_delta = std::max(p.max_abs_delta, d);
    ++p.scored;
  };
  for (const auto& s : strings) {
    std::vector<std::size_t> positions;
    for (std::size_t i = 0; i < s.size() / 2; ++i)
      if (!task.alternatives(s[i]).empty()) positions.push_back(i);
    if (options.exhaustive) {
      if (positions.empty()) {
        ++p.skipped;
        continue;
      }
      const double base = mean_loss(scorer, task, s);
      for (std::size_t i : positions)
        for (int alt : task.alternatives(s[i])) {
          Sequence v = s;
          v[i] = alt;
          record(base, v);
        }
      continue;
    }
    if (positions.size() < options.flips) {
      ++p.skipped;
      continue;
    }
    Sequence v = s;
    std::shuffle(positions.begin(), positions.end(), rng);
    for (std::size_t j = 0; j < options.flips; ++j) {
      const auto alts = task.alternatives(s[positions[j]]);
      v[positions[j]] = alts[std::uniform_int_distribution<std::size_t>(0, alts.size() - 1)(rng)];
    }
    record(mean_loss(scorer, task, s), v);
  }
  if (p.scored > 0) p.mean_abs_delta = total / double(p.scored);
  return p;
}

Agreement stack_action_agreement(const SequenceScorer& scorer, const LanguageTask& task,
                                 const std::vector<Sequence>& strings, std::uint64_t seed,
                                 std::optional<ExpectedAction> only) {
  if (scorer.num_stacks() == 0)
    throw std::invalid_argument("stack-action agreement needs a stack-augmented model");
  std::mt19937_64 rng(seed);
  Agreement a;
  for (const auto& s : strings) {
    const ReferenceProfile profile = task.reference_profile(s);
    const SequenceScores scores = scorer.score(s);
    const auto& actions = scores.actions.at(0);
    for (std::size_t t = 0; t < s.size(); ++t) {
      const ExpectedAction want = profile.actions[t];
      if (want == ExpectedAction::unconstrained || (only && want != *only)) continue;
      const auto& pr = actions.at(t);
      const double top = std::max({pr[0], pr[1], pr[2]});
      std::vector<int> ties;
      for (int k = 0; k < 3; ++k)
        if (pr[k] == top) ties.push_back(k);
      const int chosen =
          ties[std::uniform_int_distribution<std::size_t>(0, ties.size() - 1)(rng)];
      ++a.constrained;
      if (chosen == int(want)) ++a.matches;
    }
  }
  if (a.constrained == 0)
    throw std::invalid_argument("task profile has no constrained positions in " + std::string(task.name()));
  a.rate = double(a.matches) / double(a.constrained);
  return a;
}

Window advantage_window(const LossCurve& a, const LossCurve& b) {
  validate_curve(a);
  validate_curve(b);
  if (a.size() != b.size()) throw std::invalid_argument("advantage window needs matching curves");
  Window w;
  std::size_t best_len = 0, run_start = 0, run_len = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::abs(a[i].length - b[i].length) > 1e-9 * std::max(1.0, a[i].length))
      throw std::invalid_argument("advantage window curves disagree on bucket " +
                                  std::to_string(i) + " length");
    if (a[i].loss + a[i].se < b[i].loss - b[i].se) {
      if (run_len == 0) run_start = i;
      ++run_len;
      if (run_len > best_len) {
        best_len = run_len;
        w.empty = false;
        w.first = run_start;
        w.last = i;
      }
    } else {
      run_len = 0;
    }
  }
  if (!w.empty) w.t_low = a[w.first].length, w.t_high = a[w.last].length;
  return w;
}

std::optional<double> detect_delta_t(const LossCurve& curve, double reference, double tolerance) {
  validate_curve(curve);
  std::optional<double> t;
  for (const auto& p : curve) {
    if (p.loss > reference * (1.0 + tolerance)) break;
    t = p.length;
  }
  return t;
}

std::string_view to_string(Verdict v) {
  switch (v) {
    case Verdict::stable: return "stable";
    case Verdict::unstable: return "unstable";
    case Verdict::inconclusive: return "inconclusive";
  }
  return "?";
}

Verdict decide_verdict(const GrowthFit& fit, const Degradation& degradation, double b_tolerance) {
  if (!fit.converged || !std::isfinite(fit.b)) return Verdict::inconclusive;
  if (fit.b > 1.0 + b_tolerance) return Verdict::unstable;
  if (degradation.flagged) return Verdict::unstable;
  return Verdict::stable;
}

OrderingCheck ordering_check(Verdict full_verdict, double full_bin0_loss,
                             const std::vector<std::pair<std::string, double>>& frozen) {
  OrderingCheck c;
  if (full_verdict != Verdict::stable) {
    c.note = "not asserted: fully trained model is " + std::string(to_string(full_verdict));
    return c;
  }
  c.asserted = true;
  for (const auto& [mode, loss] : frozen) {
    if (full_bin0_loss > loss) {
      c.holds = false;
      if (!c.note.empty()) c.note += "; ";
      c.note += "full bin0 loss exceeds mode " + mode;
    }
  }
  return c;
}

namespace {

using nlohmann::json;

json num(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double num(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

json curve_json(const LossCurve& c) {
  json arr = json::array();
  for (const auto& p : c)
    arr.push_back({{"length", p.length}, {"loss", p.loss}, {"stderr", p.se}, {"n", p.n}});
  return arr;
}

LossCurve curve_from(const json& j) {
  LossCurve c;
  for (const auto& p : j)
    c.push_back({p.at("length").get<double>(), p.at("loss").get<double>(),
                 p.at("stderr").get<double>(), p.at("n").get<std::size_t>()});
  return c;
}

template <typename Enum>
Enum enum_from(const json& j, std::initializer_list<Enum> values) {
  const auto text = j.get<std::string>();
  for (Enum v : values)
    if (to_string(v) == text) return v;
  throw std::invalid_argument("unknown value " + text);
}

}  // namespace

json to_json(const StabilityReport& r) {
  json j;
  j["bound"] = num(r.bound);
  j["bound_c"] = num(r.bound_c);
  j["within_bound"] = r.within_bound;
  j["curve"] = curve_json(r.curve);
  j["variance_profile"] = json::array();
  for (double v : r.variance_profile) j["variance_profile"].push_back(num(v));
  j["variance"] = num(r.variance);
  const auto& g = r.growth;
  j["growth"] = {{"a", num(g.a)},           {"b", num(g.b)},
                 {"c", num(g.c)},           {"residual", num(g.residual)},
                 {"b_low", num(g.b_low)},   {"b_high", num(g.b_high)},
                 {"converged", g.converged}, {"constant", g.constant},
                 {"growth", to_string(g.growth)}};
  j["degradation"] = {{"loss_ratio", num(r.degradation.loss_ratio)},
                      {"retention", num(r.degradation.retention)},
                      {"flagged", r.degradation.flagged}};
  j["perturbation"] = nullptr;
  if (r.perturbation)
    j["perturbation"] = {{"mean_abs_delta", num(r.perturbation->mean_abs_delta)},
                         {"max_abs_delta", num(r.perturbation->max_abs_delta)},
                         {"scored", r.perturbation->scored},
                         {"skipped", r.perturbation->skipped}};
  j["random_equivalence"] = nullptr;
  if (r.random_equivalence) {
    json es = json::array();
    for (double e : r.random_equivalence->effect_sizes) es.push_back(num(e));
    j["random_equivalence"] = {{"equivalent", r.random_equivalence->equivalent},
                               {"difference", num(r.random_equivalence->difference)},
                               {"pooled_se", num(r.random_equivalence->pooled_se)},
                               {"effect_sizes", es}};
  }
  j["stack_agreement"] = nullptr;
  if (r.stack_agreement)
    j["stack_agreement"] = {{"rate", num(r.stack_agreement->rate)},
                            {"constrained", r.stack_agreement->constrained},
                            {"matches", r.stack_agreement->matches}};
  j["advantage"] = nullptr;
  if (r.advantage)
    j["advantage"] = {{"empty", r.advantage->empty},   {"first", r.advantage->first},
                      {"last", r.advantage->last},     {"t_low", num(r.advantage->t_low)},
                      {"t_high", num(r.advantage->t_high)}};
  j["delta_t"] = r.delta_t ? num(*r.delta_t) : json(nullptr);
  j["verdict"] = to_string(r.verdict);
  return j;
}

StabilityReport stability_report_from_json(const json& j) {
  StabilityReport r;
  r.bound = num(j.at("bound"));
  r.bound_c = num(j.at("bound_c"));
  r.within_bound = j.at("within_bound").get<bool>();
  r.curve = curve_from(j.at("curve"));
  for (const auto& v : j.at("variance_profile")) r.variance_profile.push_back(num(v));
  r.variance = num(j.at("variance"));
  const auto& g = j.at("growth");
  r.growth.a = num(g.at("a"));
  r.growth.b = num(g.at("b"));
  r.growth.c = num(g.at("c"));
  r.growth.residual = num(g.at("residual"));
  r.growth.b_low = num(g.at("b_low"));
  r.growth.b_high = num(g.at("b_high"));
  r.growth.converged = g.at("converged").get<bool>();
  r.growth.constant = g.at("constant").get<bool>();
  r.growth.growth = enum_from(g.at("growth"), {Growth::sublinear_or_linear, Growth::superlinear,
                                               Growth::inconclusive});
  const auto& d = j.at("degradation");
  r.degradation = {num(d.at("loss_ratio")), num(d.at("retention")), d.at("flagged").get<bool>()};
  if (const auto& p = j.at("perturbation"); !p.is_null())
    r.perturbation = Perturbation{num(p.at("mean_abs_delta")), num(p.at("max_abs_delta")),
                                  p.at("scored").get<std::size_t>(),
                                  p.at("skipped").get<std::size_t>()};
  if (const auto& e = j.at("random_equivalence"); !e.is_null()) {
    Equivalence eq{e.at("equivalent").get<bool>(), num(e.at("difference")),
                   num(e.at("pooled_se")), {}};
    for (const auto& v : e.at("effect_sizes")) eq.effect_sizes.push_back(num(v));
    r.random_equivalence = eq;
  }
  if (const auto& a = j.at("stack_agreement"); !a.is_null())
    r.stack_agreement = Agreement{num(a.at("rate")), a.at("constrained").get<std::size_t>(),
                                  a.at("matches").get<std::size_t>()};
  if (const auto& w = j.at("advantage"); !w.is_null())
    r.advantage = Window{w.at("empty").get<bool>(), w.at("first").get<std::size_t>(),
                         w.at("last").get<std::size_t>(), num(w.at("t_low")),
                         num(w.at("t_high"))};
  if (!j.at("delta_t").is_null()) r.delta_t = num(j.at("delta_t"));
  r.verdict = enum_from(j.at("verdict"),
                        {Verdict::stable, Verdict::unstable, Verdict::inconclusive});
  return r;
}

}  // namespace stacklab
