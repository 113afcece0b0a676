// Copyright 2026 The seqrec Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "seqrec/common.hpp"

namespace seqrec {

// ---- Levenberg-Marquardt ------------------------------------------------------

struct FitReport {
  double rss = std::numeric_limits<double>::infinity();
  std::size_t iterations = 0;
  bool converged = false;
  double gradient_norm = std::numeric_limits<double>::infinity();  // |Jᵀr| in fitting coordinates
  std::size_t start_index = 0;
  std::size_t starts = 0;
  std::string message;
};

inline nlohmann::json to_json(const FitReport& r) {
  return {{"rss", r.rss},
          {"iterations", r.iterations},
          {"converged", r.converged},
          {"gradient_norm", r.gradient_norm},
          {"start_index", r.start_index},
          {"starts", r.starts},
          {"message", r.message}};
}

struct LmOptions {
  std::size_t max_iterations = 500;
  double rel_tolerance = 1e-10;
};

/// Fills residuals r (model − data) and the Jacobian J for coordinates u.
/// Returns false when the model is not finite at u.
using ResidualFn = std::function<bool(const Eigen::VectorXd& u, Eigen::VectorXd& r, Eigen::MatrixXd* J)>;

struct LmResult {
  Eigen::VectorXd u;
  FitReport report;
};

inline LmResult levenberg_marquardt(const ResidualFn& fn, Eigen::VectorXd u, const LmOptions& opt = {}) {
  LmResult out;
  Eigen::VectorXd r, r_try;
  Eigen::MatrixXd J;
  if (!fn(u, r, &J) || !r.allFinite() || !J.allFinite()) {
    out.u = u;
    out.report.message = "model not finite at the start point";
    return out;
  }
  double rss = r.squaredNorm();
  double mu = 1e-3;
  std::size_t it = 0;
  bool done = false;
  for (; it < opt.max_iterations && !done; ++it) {
    const Eigen::MatrixXd JtJ = J.transpose() * J;
    const Eigen::VectorXd g = J.transpose() * r;
    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd A = JtJ;
      for (Eigen::Index i = 0; i < A.rows(); ++i) A(i, i) += mu * std::max(JtJ(i, i), 1e-12);
      const Eigen::VectorXd step = A.ldlt().solve(-g);
      const Eigen::VectorXd u_try = u + step;
      Eigen::MatrixXd J_try;
      if (step.allFinite() && fn(u_try, r_try, &J_try) && r_try.allFinite() && J_try.allFinite()) {
        const double rss_try = r_try.squaredNorm();
        if (rss_try <= rss) {
          const double rel = (rss - rss_try) / std::max(rss, std::numeric_limits<double>::min());
          u = u_try;
          r = r_try;
          J = std::move(J_try);
          rss = rss_try;
          mu = std::max(mu / 10, 1e-15);
          accepted = true;
          if (rel < opt.rel_tolerance || rss == 0) done = true;
          continue;
        }
      }
      mu *= 10;
      if (mu > 1e20) {
        done = true;  // no descent direction left at this precision
        break;
      }
    }
  }
  out.u = u;
  out.report.rss = rss;
  out.report.iterations = it;
  out.report.gradient_norm = (J.transpose() * r).norm();
  out.report.converged = done && std::isfinite(rss);
  if (!out.report.converged) out.report.message = "iteration limit reached";
  return out;
}

// ---- sigmoid of log-FLOPs -------------------------------------------------------

/// y = a / (1 + exp(−b (x − c))) + d with x = ln(FLOPs).
struct SigmoidFit {
  double a = 0, b = 0, c = 0, d = 0;
};

inline double sigmoid_value(const SigmoidFit& s, double x) { return s.a / (1 + std::exp(-s.b * (x - s.c))) + s.d; }

/// Fitting coordinates (ln a, ln b, c, d).
inline Eigen::VectorXd sigmoid_to_coords(const SigmoidFit& s) {
  Eigen::VectorXd u(4);
  u << std::log(s.a), std::log(s.b), s.c, s.d;
  return u;
}

inline SigmoidFit sigmoid_from_coords(const Eigen::VectorXd& u) { return {std::exp(u[0]), std::exp(u[1]), u[2], u[3]}; }

/// Row of ∂y/∂u at x.
inline Eigen::RowVector4d sigmoid_jacobian_row(const Eigen::VectorXd& u, double x) {
  const SigmoidFit s = sigmoid_from_coords(u);
  const double sg = 1 / (1 + std::exp(-s.b * (x - s.c)));
  const double slope = s.a * sg * (1 - sg);
  return {s.a * sg, slope * (x - s.c) * s.b, -slope * s.b, 1.0};
}

struct SigmoidPoint {
  double x = 0;  // ln FLOPs
  double y = 0;
};

struct SigmoidFitResult {
  std::optional<SigmoidFit> fit;
  FitReport report;
  std::vector<FitReport> candidates;
  double linear_rss = 0;  // ordinary least squares line, for comparison
  double linear_slope = 0, linear_intercept = 0;
};

inline std::vector<SigmoidFit> sigmoid_starts(std::span<const SigmoidPoint> pts) {
  std::vector<double> xs;
  for (const auto& p : pts) xs.push_back(p.x);
  std::sort(xs.begin(), xs.end());
  const double span = std::max(xs.back() - xs.front(), 1e-9);
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(xs.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, xs.size() - 1);
    return xs[lo] + (pos - static_cast<double>(lo)) * (xs[hi] - xs[lo]);
  };
  std::vector<SigmoidFit> out;
  for (double q : {0.25, 0.5, 0.75}) {
    for (double scale : {0.1, 1.0, 10.0}) {
      SigmoidFit s;
      s.c = quantile(q);
      s.b = scale * 4.0 / span;
      // a and d by linear least squares with the shape fixed.
      double sxx = 0, sx = 0, sxy = 0, sy = 0;
      const double n = static_cast<double>(pts.size());
      for (const auto& p : pts) {
        const double g = 1 / (1 + std::exp(-s.b * (p.x - s.c)));
        sxx += g * g;
        sx += g;
        sxy += g * p.y;
        sy += p.y;
      }
      const double det = n * sxx - sx * sx;
      double a = det > 1e-12 ? (n * sxy - sx * sy) / det : 0.0;
      double ymin = pts[0].y, ymax = pts[0].y;
      for (const auto& p : pts) ymin = std::min(ymin, p.y), ymax = std::max(ymax, p.y);
      if (!(a > 0)) a = std::max(std::abs(a), std::max(ymax - ymin, 1e-6));
      s.a = a;
      s.d = (sy - a * sx) / n;
      out.push_back(s);
    }
  }
  return out;
}

/// Multi-start Levenberg-Marquardt; the lowest residual wins (ties: lowest
/// start index).
inline SigmoidFitResult fit_sigmoid(std::span<const SigmoidPoint> pts, const LmOptions& opt = {},
                                    std::span<const SigmoidFit> starts = {}) {
  if (pts.size() < 5) throw ConfigError("sigmoid fit needs at least 5 points, got " + std::to_string(pts.size()));
  for (const auto& p : pts)
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw DataError("sigmoid fit: non-finite point");
  const auto default_starts = sigmoid_starts(pts);
  if (starts.empty()) starts = default_starts;
  ResidualFn fn = [&](const Eigen::VectorXd& u, Eigen::VectorXd& r, Eigen::MatrixXd* J) {
    const SigmoidFit s = sigmoid_from_coords(u);
    r.resize(static_cast<Eigen::Index>(pts.size()));
    if (J) J->resize(r.size(), 4);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      r[ii] = sigmoid_value(s, pts[i].x) - pts[i].y;
      if (J) J->row(ii) = sigmoid_jacobian_row(u, pts[i].x);
    }
    return r.allFinite();
  };
  SigmoidFitResult out;
  std::optional<LmResult> best;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    auto res = levenberg_marquardt(fn, sigmoid_to_coords(starts[k]), opt);
    res.report.start_index = k;
    out.candidates.push_back(res.report);
    if (!res.report.converged) continue;
    if (!best || res.report.rss < best->report.rss) best = std::move(res);
  }
  // Linear comparison fit.
  {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(pts.size());
    for (const auto& p : pts) sx += p.x, sy += p.y, sxx += p.x * p.x, sxy += p.x * p.y;
    const double det = n * sxx - sx * sx;
    out.linear_slope = det != 0 ? (n * sxy - sx * sy) / det : 0;
    out.linear_intercept = (sy - out.linear_slope * sx) / n;
    for (const auto& p : pts) {
      const double e = out.linear_slope * p.x + out.linear_intercept - p.y;
      out.linear_rss += e * e;
    }
  }
  if (!best) {
    out.report.converged = false;
    out.report.starts = starts.size();
    out.report.message = "all " + std::to_string(starts.size()) + " starts failed to converge";
    return out;
  }
  out.fit = sigmoid_from_coords(best->u);
  out.report = best->report;
  out.report.starts = starts.size();
  return out;
}

/// ln((3+√3)/(3−√3)): offset from c, in units of 1/b, of the most negative
/// second derivative of a rising logistic curve.
inline const double kSigmoidKneeOffset = std::log((3 + std::sqrt(3.0)) / (3 - std::sqrt(3.0)));

struct SigmoidPrediction {
  double raw = 0;
  double value = 0;  // clamped to [0, 1]
  bool clamped = false;
  double diminishing_returns_x = 0;
  double diminishing_returns_value = 0;
};

inline SigmoidPrediction predict(const SigmoidFit& s, double log_flops) {
  if (!(s.a > 0 && s.b > 0)) throw ConfigError("sigmoid prediction needs a > 0 and b > 0");
  SigmoidPrediction p;
  p.raw = sigmoid_value(s, log_flops);
  p.value = std::clamp(p.raw, 0.0, 1.0);
  p.clamped = p.value != p.raw;
  p.diminishing_returns_x = s.c + kSigmoidKneeOffset / s.b;
  p.diminishing_returns_value = sigmoid_value(s, p.diminishing_returns_x);
  return p;
}

inline SigmoidPrediction predict(const SigmoidFitResult& r, double log_flops) {
  if (!r.fit || !r.report.converged) throw ConfigError("cannot predict from a non-converged sigmoid fit");
  return predict(*r.fit, log_flops);
}

inline double sigmoid_asymptote(const SigmoidFit& s) { return s.a + s.d; }
inline double sigmoid_midpoint_value(const SigmoidFit& s) { return s.a / 2 + s.d; }

// ---- risk decomposition ---------------------------------------------------------

/// y = E − A / N^α − B / T^β.
struct RiskFit {
  double E = 0, A = 0, alpha = 0, B = 0, beta = 0;
};

inline double risk_value(const RiskFit& f, double n, double t) {
  return f.E - f.A * std::pow(n, -f.alpha) - f.B * std::pow(t, -f.beta);
}

/// Fitting coordinates (logit E, ln A, ln α, ln B, ln β).
inline Eigen::VectorXd risk_to_coords(const RiskFit& f) {
  Eigen::VectorXd u(5);
  u << std::log(f.E / (1 - f.E)), std::log(f.A), std::log(f.alpha), std::log(f.B), std::log(f.beta);
  return u;
}

inline RiskFit risk_from_coords(const Eigen::VectorXd& u) {
  return {1 / (1 + std::exp(-u[0])), std::exp(u[1]), std::exp(u[2]), std::exp(u[3]), std::exp(u[4])};
}

inline Eigen::Matrix<double, 1, 5> risk_jacobian_row(const Eigen::VectorXd& u, double n, double t) {
  const RiskFit f = risk_from_coords(u);
  const double pn = f.A * std::pow(n, -f.alpha);
  const double pt = f.B * std::pow(t, -f.beta);
  Eigen::Matrix<double, 1, 5> row;
  row << f.E * (1 - f.E), -pn, pn * std::log(n) * f.alpha, -pt, pt * std::log(t) * f.beta;
  return row;
}

struct RiskPoint {
  double n = 0;  // non-embedding parameters
  double t = 0;  // seen interactions
  double y = 0;
};

struct RiskFitResult {
  std::optional<RiskFit> fit;
  FitReport report;
  std::vector<FitReport> candidates;
};

inline std::vector<RiskFit> risk_starts(std::span<const RiskPoint> pts) {
  double ymax = -1e300, ymin = 1e300, nmin = 1e300, tmin = 1e300;
  for (const auto& p : pts) {
    ymax = std::max(ymax, p.y), ymin = std::min(ymin, p.y);
    nmin = std::min(nmin, p.n), tmin = std::min(tmin, p.t);
  }
  const double e0 = std::clamp(ymax + 0.05 * std::max(ymax - ymin, 1e-3), 1e-3, 1 - 1e-3);
  const double gap = std::max(e0 - ymin, 1e-6);
  std::vector<RiskFit> out;
  for (double alpha : {0.2, 0.4, 0.6})
    for (double beta : {0.2, 0.4, 0.6})
      for (double fa : {0.1, 1.0, 10.0})
        for (double fb : {0.1, 1.0, 10.0}) {
          RiskFit f;
          f.E = e0;
          f.alpha = alpha;
          f.beta = beta;
          // Scale so each term alone would explain half the observed gap at the smallest N or T.
          f.A = fa * 0.5 * gap * std::pow(nmin, alpha);
          f.B = fb * 0.5 * gap * std::pow(tmin, beta);
          out.push_back(f);
        }
  return out;
}

inline RiskFitResult fit_risk(std::span<const RiskPoint> pts, const LmOptions& opt = {},
                              std::span<const RiskFit> starts = {}) {
  if (pts.size() < 6) throw ConfigError("risk fit needs at least 6 points, got " + std::to_string(pts.size()));
  std::set<double> ns, ts;
  for (const auto& p : pts) {
    if (!(p.n > 0) || !(p.t > 0) || !std::isfinite(p.y)) throw DataError("risk fit: N and T must be positive and finite");
    ns.insert(p.n);
    ts.insert(p.t);
  }
  if (ns.size() < 2) throw ConfigError("risk fit: degenerate span on the N axis (need >= 2 distinct values)");
  if (ts.size() < 2) throw ConfigError("risk fit: degenerate span on the T axis (need >= 2 distinct values)");
  const auto default_starts = risk_starts(pts);
  if (starts.empty()) starts = default_starts;
  ResidualFn fn = [&](const Eigen::VectorXd& u, Eigen::VectorXd& r, Eigen::MatrixXd* J) {
    const RiskFit f = risk_from_coords(u);
    r.resize(static_cast<Eigen::Index>(pts.size()));
    if (J) J->resize(r.size(), 5);
    for (std::size_t i = 0; i < pts.size(); ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      r[ii] = risk_value(f, pts[i].n, pts[i].t) - pts[i].y;
      if (J) J->row(ii) = risk_jacobian_row(u, pts[i].n, pts[i].t);
    }
    return r.allFinite();
  };
  RiskFitResult out;
  std::optional<LmResult> best;
  for (std::size_t k = 0; k < starts.size(); ++k) {
    auto res = levenberg_marquardt(fn, risk_to_coords(starts[k]), opt);
    res.report.start_index = k;
    out.candidates.push_back(res.report);
    if (!res.report.converged) continue;
    if (!best || res.report.rss < best->report.rss) best = std::move(res);
  }
  if (!best) {
    out.report.starts = starts.size();
    out.report.message = "all " + std::to_string(starts.size()) + " starts failed to converge";
    return out;
  }
  out.fit = risk_from_coords(best->u);
  out.report = best->report;
  out.report.starts = starts.size();
  return out;
}

struct RiskPrediction {
  double raw = 0;
  double value = 0;
  bool clamped = false;
};

inline RiskPrediction predict(const RiskFit& f, double n, double t) {
  RiskPrediction p;
  p.raw = risk_value(f, n, t);
  p.value = std::clamp(p.raw, 0.0, 1.0);
  p.clamped = p.value != p.raw;
  return p;
}

inline RiskPrediction predict(const RiskFitResult& r, double n, double t) {
  if (!r.fit || !r.report.converged) throw ConfigError("cannot predict from a non-converged risk fit");
  return predict(*r.fit, n, t);
}

// ---- reference coefficients and JSON ------------------------------------------

/// Coefficients reported for the full-scale study.
inline constexpr SigmoidFit kReferenceSigmoid{0.396, 0.18, 24.44, -0.247};
inline constexpr RiskFit kReferenceRisk{0.163, 18.56, 0.376, 2.9, 0.364};
/// The quoted maximum at ln FLOPs = 30.7, kept for comparison with our evaluation.
inline constexpr double kReferenceQuotedMaximum = 0.0525;
inline constexpr double kReferenceQuotedLogFlops = 30.7;

inline nlohmann::json to_json(const SigmoidFit& s) {
  return {{"a", s.a}, {"b", s.b}, {"c", s.c}, {"d", s.d}, {"asymptote", sigmoid_asymptote(s)},
          {"midpoint_value", sigmoid_midpoint_value(s)}};
}

inline nlohmann::json to_json(const RiskFit& f) {
  return {{"E", f.E}, {"A", f.A}, {"alpha", f.alpha}, {"B", f.B}, {"beta", f.beta}};
}

inline nlohmann::json to_json(const SigmoidFitResult& r) {
  nlohmann::json j = {{"report", to_json(r.report)},
                      {"linear", {{"slope", r.linear_slope}, {"intercept", r.linear_intercept}, {"rss", r.linear_rss}}}};
  j["parameters"] = r.fit ? to_json(*r.fit) : nlohmann::json(nullptr);
  if (r.fit) {
    const auto p = predict(*r.fit, r.fit->c);
    j["diminishing_returns"] = {{"log_flops", p.diminishing_returns_x}, {"value", p.diminishing_returns_value}};
  }
  return j;
}

inline nlohmann::json to_json(const RiskFitResult& r) {
  nlohmann::json j = {{"report", to_json(r.report)}};
  j["parameters"] = r.fit ? to_json(*r.fit) : nlohmann::json(nullptr);
  return j;
}

/// Comparison of the reference sigmoid with its quoted near-saturation value.
inline nlohmann::json reference_sigmoid_check() {
  const auto p = predict(kReferenceSigmoid, kReferenceQuotedLogFlops);
  return {{"log_flops", kReferenceQuotedLogFlops},
          {"flops", std::exp(kReferenceQuotedLogFlops)},
          {"evaluated", p.raw},
          {"quoted", kReferenceQuotedMaximum},
          {"difference", p.raw - kReferenceQuotedMaximum},
          {"asymptote", sigmoid_asymptote(kReferenceSigmoid)},
          {"midpoint_value", sigmoid_midpoint_value(kReferenceSigmoid)},
          {"diminishing_returns_log_flops", p.diminishing_returns_x},
          {"note",
           "the quoted FLOPs count 2.15e-13 is read as e^30.7 = 2.15e13; the evaluated value differs from the "
           "quoted maximum by the reported difference"}};
}

}  // namespace seqrec
