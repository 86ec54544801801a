#include "cpe/policy.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

namespace cpe {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

[[noreturn]] void domain_error(const std::string& what) {
  throw Error(ErrorKind::DomainError, what);
}

}  // namespace

PolicySpec PolicySpec::type_b(double alpha) {
  PolicySpec s;
  s.kind = PolicyKind::TypeB;
  s.alpha = alpha;
  s.validate();
  return s;
}

PolicySpec PolicySpec::cips(double delta0, CipsDeltaMode mode) {
  PolicySpec s;
  s.kind = PolicyKind::Cips;
  s.delta0 = delta0;
  s.delta_mode = mode;
  s.validate();
  return s;
}

PolicySpec PolicySpec::cms(double lambda, std::string x_star_name) {
  PolicySpec s;
  s.kind = PolicyKind::Cms;
  s.lambda = lambda;
  s.x_star_name = std::move(x_star_name);
  s.validate();
  return s;
}

PolicySpec PolicySpec::cms_column(double lambda, int x_star_column) {
  PolicySpec s;
  s.kind = PolicyKind::Cms;
  s.lambda = lambda;
  s.x_star_column = x_star_column;
  s.validate();
  return s;
}

PolicySpec PolicySpec::tpb(double rho) {
  PolicySpec s;
  s.kind = PolicyKind::Tpb;
  s.rho = rho;
  s.validate();
  return s;
}

double PolicySpec::delta_value(std::span<const double> x, int n) const {
  double d;
  switch (delta_mode) {
    case CipsDeltaMode::Constant:
      d = delta0;
      break;
    case CipsDeltaMode::Varying:
      d = delta0 * (1.0 + 1.0 / n);
      break;
    case CipsDeltaMode::Custom:
      d = delta_fn(x, n);
      break;
    default:
      d = delta0;
  }
  if (!(d > 0.0)) domain_error("CIPS delta(X,N) must be positive, got " + fmt_g(d));
  return d;
}

void PolicySpec::validate() const {
  switch (kind) {
    case PolicyKind::TypeB:
      if (!(alpha > 0.0 && alpha < 1.0)) domain_error("type B alpha must lie in (0,1)");
      break;
    case PolicyKind::Cips:
      if (delta_mode == CipsDeltaMode::Custom) {
        if (!delta_fn) domain_error("CIPS custom mode requires a delta callable");
      } else if (!(delta0 > 0.0)) {
        domain_error("CIPS delta0 must be positive");
      }
      break;
    case PolicyKind::Cms:
      if (!(lambda >= 0.0 && lambda <= 1.0)) domain_error("CMS lambda must lie in [0,1]");
      if (x_star_column < 0 && x_star_name.empty())
        domain_error("CMS policy needs an x_star column");
      break;
    case PolicyKind::Tpb:
      if (!(rho >= 0.0 && rho <= 1.0)) domain_error("TPB rho must lie in [0,1]");
      break;
  }
}

void PolicySpec::resolve(const Dataset& data) {
  if (kind != PolicyKind::Cms) return;
  if (x_star_column < 0) {
    for (int c = 0; c < static_cast<int>(data.column_names.size()); ++c) {
      if (data.column_names[static_cast<std::size_t>(c)] == x_star_name) {
        x_star_column = c;
        break;
      }
    }
    if (x_star_column < 0) {
      throw Error(ErrorKind::MissingColumn, "CMS x_star column '" + x_star_name + "' not found");
    }
  }
  if (x_star_column >= data.p) {
    throw Error(ErrorKind::MissingColumn,
                "CMS x_star column index " + std::to_string(x_star_column) + " out of range");
  }
  for (const auto& c : data.clusters) {
    for (int j = 0; j < c.n; ++j) {
      double v = c.x[static_cast<std::size_t>(j) * c.p + x_star_column];
      if (v != 0.0 && v != 1.0) {
        domain_error("CMS x_star column must be binary, found " + fmt_g(v));
      }
    }
  }
}

std::string PolicySpec::canonical() const {
  switch (kind) {
    case PolicyKind::TypeB:
      return "typeb:alpha=" + fmt_g(alpha);
    case PolicyKind::Cips: {
      const char* mode = delta_mode == CipsDeltaMode::Constant ? "constant"
                         : delta_mode == CipsDeltaMode::Varying ? "varying"
                                                                : "custom";
      return "cips:delta0=" + fmt_g(delta0) + ",mode=" + mode;
    }
    case PolicyKind::Cms:
      return "cms:lambda=" + fmt_g(lambda) +
             ",xstar=" + (x_star_name.empty() ? std::to_string(x_star_column) : x_star_name);
    case PolicyKind::Tpb:
      return "tpb:rho=" + fmt_g(rho);
  }
  return {};
}

double PolicySpec::param() const {
  switch (kind) {
    case PolicyKind::TypeB:
      return alpha;
    case PolicyKind::Cips:
      return delta0;
    case PolicyKind::Cms:
      return lambda;
    case PolicyKind::Tpb:
      return rho;
  }
  return 0.0;
}

PolicySpec parse_policy(const std::string& text) {
  auto colon = text.find(':');
  const std::string head = text.substr(0, colon);
  std::vector<std::pair<std::string, std::string>> kv;
  if (colon != std::string::npos) {
    std::string rest = text.substr(colon + 1);
    std::size_t pos = 0;
    while (pos < rest.size()) {
      std::size_t comma = rest.find(',', pos);
      std::string item = rest.substr(pos, comma == std::string::npos ? comma : comma - pos);
      auto eq = item.find('=');
      if (eq == std::string::npos) {
        throw Error(ErrorKind::UnknownPolicy, "bad policy option '" + item + "' in '" + text + "'");
      }
      kv.emplace_back(item.substr(0, eq), item.substr(eq + 1));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  }
  auto get = [&](const std::string& key, const char* fallback = nullptr) -> std::string {
    for (auto& [k, v] : kv) {
      if (k == key) return v;
    }
    if (fallback) return fallback;
    throw Error(ErrorKind::UnknownPolicy, "policy '" + text + "' is missing option '" + key + "'");
  };
  auto get_num = [&](const std::string& key) {
    std::string v = get(key);
    try {
      return std::stod(v);
    } catch (const std::exception&) {
      throw Error(ErrorKind::UnknownPolicy, "policy option " + key + "='" + v + "' is not numeric");
    }
  };

  try {
    if (head == "typeb") return PolicySpec::type_b(get_num("alpha"));
    if (head == "cips") {
      std::string mode = get("mode", "constant");
      if (mode != "constant" && mode != "varying") {
        throw Error(ErrorKind::UnknownPolicy, "CIPS mode must be constant or varying");
      }
      return PolicySpec::cips(get_num("delta0"), mode == "constant" ? CipsDeltaMode::Constant
                                                                    : CipsDeltaMode::Varying);
    }
    if (head == "cms") return PolicySpec::cms(get_num("lambda"), get("xstar"));
    if (head == "tpb") return PolicySpec::tpb(get_num("rho"));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::DomainError) {
      throw Error(ErrorKind::UnknownPolicy, std::string(e.what()) + " in '" + text + "'");
    }
    throw;
  }
  throw Error(ErrorKind::UnknownPolicy, "unknown policy '" + head + "'");
}

double shifted_propensity_cips(double pi, double delta_val) {
  if (!(pi > 0.0 && pi < 1.0)) domain_error("propensity must lie in (0,1)");
  if (!(delta_val > 0.0)) domain_error("delta must be positive");
  return delta_val * pi / (delta_val * pi + 1.0 - pi);
}

double shifted_propensity_cms(double pi, double lambda, int x_star) {
  if (!(pi > 0.0 && pi < 1.0)) domain_error("propensity must lie in (0,1)");
  if (!(lambda >= 0.0 && lambda <= 1.0)) domain_error("lambda must lie in [0,1]");
  if (x_star != 0 && x_star != 1) domain_error("x_star must be 0 or 1");
  return x_star ? 1.0 - lambda + lambda * pi : pi;
}

PolicyEvaluator::PolicyEvaluator(const PolicySpec& spec, const ClusterObservation& cluster,
                                 std::span<const double> pi,
                                 std::optional<TreatmentVector> observed)
    : spec_(&spec), cluster_(&cluster), n_(cluster.n) {
  a_obs_ = observed.value_or(cluster.a_bits);
  pi_.assign(pi.begin(), pi.end());
  log_mass_.assign(static_cast<std::size_t>(2 * n_), 0.0);
  mass_.assign(static_cast<std::size_t>(2 * n_), 0.0);
  phi_term_.assign(static_cast<std::size_t>(2 * n_), 0.0);

  auto set_unit = [&](int j, double mass1, double phi1, double phi0) {
    log_mass_[static_cast<std::size_t>(2 * j + 1)] = std::log(mass1);
    log_mass_[static_cast<std::size_t>(2 * j)] = std::log1p(-mass1);
    mass_[static_cast<std::size_t>(2 * j + 1)] = mass1;
    mass_[static_cast<std::size_t>(2 * j)] = 1.0 - mass1;
    phi_term_[static_cast<std::size_t>(2 * j + 1)] = phi1;
    phi_term_[static_cast<std::size_t>(2 * j)] = phi0;
  };

  switch (spec.kind) {
    case PolicyKind::TypeB: {
      for (int j = 0; j < n_; ++j) set_unit(j, spec.alpha, 0.0, 0.0);
      break;
    }
    case PolicyKind::Cips: {
      // delta may depend on the whole covariate matrix and N
      const double d = spec.delta_value(std::span<const double>(cluster.x), n_);
      for (int j = 0; j < n_; ++j) {
        const double pij = pi_[static_cast<std::size_t>(j)];
        const double denom = d * pij + 1.0 - pij;
        const double shifted = shifted_propensity_cips(pij, d);
        const double num = d * (a_obs_.bit(j) - pij) / (denom * denom);
        set_unit(j, shifted, num / shifted, -num / (1.0 - shifted));
      }
      break;
    }
    case PolicyKind::Cms: {
      for (int j = 0; j < n_; ++j) {
        const double pij = pi_[static_cast<std::size_t>(j)];
        const double xs = cluster.x[static_cast<std::size_t>(j) * cluster.p + spec.x_star_column];
        if (xs != 0.0 && xs != 1.0) domain_error("CMS x_star value must be 0 or 1");
        const double shifted = shifted_propensity_cms(pij, spec.lambda, static_cast<int>(xs));
        const double scale = xs * spec.lambda + 1.0 - xs;
        const double num = (a_obs_.bit(j) - pij) * scale;
        // shifted can hit 1 exactly (lambda=0 on a targeted unit); the phi
        // numerator vanishes there too, so the term is 0, not inf
        const double phi1 = shifted > 0.0 ? num / shifted : 0.0;
        const double phi0 = shifted < 1.0 ? -num / (1.0 - shifted) : 0.0;
        set_unit(j, shifted, phi1, phi0);
      }
      break;
    }
    case PolicyKind::Tpb: {
      for (int j = 0; j < n_; ++j) set_unit(j, pi_[static_cast<std::size_t>(j)], 0.0, 0.0);
      s_min_ = std::max(0, static_cast<int>(std::ceil(spec.rho * n_ - 1e-9)));
      // Poisson-binomial tail P(S >= s_min) over the unit propensities
      std::vector<double> dist(static_cast<std::size_t>(n_) + 1, 0.0);
      dist[0] = 1.0;
      for (int j = 0; j < n_; ++j) {
        const double pij = pi_[static_cast<std::size_t>(j)];
        for (int k = j + 1; k >= 1; --k) {
          dist[static_cast<std::size_t>(k)] =
              dist[static_cast<std::size_t>(k)] * (1.0 - pij) +
              dist[static_cast<std::size_t>(k - 1)] * pij;
        }
        dist[0] *= 1.0 - pij;
      }
      double tail = 0.0;
      for (int k = n_; k >= s_min_; --k) tail += dist[static_cast<std::size_t>(k)];
      if (tail < kTpbDenominatorFloor) {
        tail = kTpbDenominatorFloor;
        floored_ = true;
      }
      p_admissible_ = std::min(tail, 1.0);
      log_p_admissible_ = std::log(p_admissible_);
      obs_admissible_ = a_obs_.count() >= s_min_;
      break;
    }
  }
}

PolicyEvaluator::Prepared PolicyEvaluator::prepare(TreatmentVector a) const {
  Prepared pv;
  pv.a = a;
  pv.count = a.count();
  double lq = 0.0;
  double cs = 0.0;
  for (int j = 0; j < n_; ++j) {
    const int b = a.bit(j);
    lq += log_mass(j, b);
    cs += phi_term(j, b);
  }
  pv.log_q = lq;
  pv.phi_sum = cs;
  pv.product = std::exp(lq);
  if (product_form()) {
    pv.q = pv.product;
  } else {
    pv.q = pv.count >= s_min_ ? pv.product / p_admissible_ : 0.0;
  }
  return pv;
}

double PolicyEvaluator::product_excluding(TreatmentVector a, int j) const {
  double lq = 0.0;
  for (int l = 0; l < n_; ++l) {
    if (l != j) lq += log_mass(l, a.bit(l));
  }
  return std::exp(lq);
}

double PolicyEvaluator::prob(TreatmentVector a) const { return prepare(a).q; }

double PolicyEvaluator::log_prob(TreatmentVector a) const {
  Prepared pv = prepare(a);
  if (product_form()) return pv.log_q;
  return pv.count >= s_min_ ? pv.log_q - log_p_admissible_ : kNegInf;
}

double PolicyEvaluator::phi_q(const Prepared& pv) const {
  if (product_form()) return pv.q * pv.phi_sum;
  if (pv.count < s_min_) return 0.0;
  const double match = pv.a == a_obs_ ? 1.0 : 0.0;
  return (match * p_admissible_ - (obs_admissible_ ? pv.product : 0.0)) /
         (p_admissible_ * p_admissible_);
}

double PolicyEvaluator::phi_q(TreatmentVector a) const { return phi_q(prepare(a)); }

double PolicyEvaluator::marginal_prob(const Prepared& pv, int j) const {
  const double m = mass(j, pv.a.bit(j));
  if (product_form()) {
    // dividing out the own-unit mass avoids a per-call exp
    if (m <= 0.0) return product_excluding(pv.a, j);
    return pv.product / m;
  }
  const double h_others = pv.product / m;  // TPB masses are clipped away from 0
  const int s_other = pv.count - pv.a.bit(j);
  const double pij = pi_[static_cast<std::size_t>(j)];
  double total = 0.0;
  if (s_other + 1 >= s_min_) total += h_others * pij;
  if (s_other >= s_min_) total += h_others * (1.0 - pij);
  return total / p_admissible_;
}

double PolicyEvaluator::marginal_prob(TreatmentVector a, int j) const {
  return marginal_prob(prepare(a), j);
}

double PolicyEvaluator::phi_q_marginal(const Prepared& pv, int j) const {
  if (product_form()) {
    // own-unit term drops: sum_b mass_j(b) c_j(b) = 0
    return marginal_prob(pv, j) * (pv.phi_sum - phi_term(j, pv.a.bit(j)));
  }
  const double h_others = pv.product / mass(j, pv.a.bit(j));
  const int s_other = pv.count - pv.a.bit(j);
  const double pij = pi_[static_cast<std::size_t>(j)];
  double total = 0.0;
  for (int b = 0; b <= 1; ++b) {
    const int s_b = s_other + b;
    if (s_b < s_min_) continue;
    const double h_b = h_others * (b ? pij : 1.0 - pij);
    const double match =
        (pv.a.with_bit(j, b) == a_obs_) ? 1.0 : 0.0;
    total += (match * p_admissible_ - (obs_admissible_ ? h_b : 0.0)) /
             (p_admissible_ * p_admissible_);
  }
  return total;
}

double PolicyEvaluator::phi_q_marginal(TreatmentVector a, int j) const {
  return phi_q_marginal(prepare(a), j);
}

std::vector<double> weight(const PolicyEvaluator& eval, WeightKind kind, TreatmentVector a) {
  const int n = eval.n();
  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  const auto pv = eval.prepare(a);
  if (kind == WeightKind::Mu) {
    const double v = eval.prob(pv) / n;
    for (auto& c : w) c = v;
    return w;
  }
  const int t = weight_t(kind);
  for (int j = 0; j < n; ++j) {
    if (a.bit(j) == t) w[static_cast<std::size_t>(j)] = eval.marginal_prob(pv, j) / n;
  }
  return w;
}

std::vector<double> phi_weight(const PolicyEvaluator& eval, WeightKind kind, TreatmentVector a) {
  const int n = eval.n();
  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  const auto pv = eval.prepare(a);
  if (kind == WeightKind::Mu) {
    const double v = eval.phi_q(pv) / n;
    for (auto& c : w) c = v;
    return w;
  }
  const int t = weight_t(kind);
  for (int j = 0; j < n; ++j) {
    if (a.bit(j) == t) w[static_cast<std::size_t>(j)] = eval.phi_q_marginal(pv, j) / n;
  }
  return w;
}

double policy_prob(const PolicySpec& spec, TreatmentVector a, const ClusterObservation& cluster,
                   std::span<const double> pi) {
  return PolicyEvaluator(spec, cluster, pi).prob(a);
}

double policy_prob_marginal(const PolicySpec& spec, TreatmentVector a, int j,
                            const ClusterObservation& cluster, std::span<const double> pi) {
  return PolicyEvaluator(spec, cluster, pi).marginal_prob(a, j);
}

double phi_q(const PolicySpec& spec, TreatmentVector a_obs, TreatmentVector a,
             const ClusterObservation& cluster, std::span<const double> pi) {
  return PolicyEvaluator(spec, cluster, pi, a_obs).phi_q(a);
}

}  // namespace cpe
