#pragma once

// Reversed time-aware LSTM encoder producing the variational posterior over
// the initial latent state, plus the planar-flow / positivity transform of
// its samples.

#include "lhm/data.hpp"
#include "lhm/diffcore.hpp"
#include "lhm/model.hpp"
#include "lhm/pharmaco.hpp"

#include <cmath>
#include <vector>

namespace lhm::inference {

using ad::Mat;
using ad::Vec;

inline constexpr double kFlowEpsilon = 1e-6;
inline constexpr const char* kEncPrefix = "enc.";

struct EncoderSpec {
  int latent_dim = 7;  // E + M
  int dims = 20;       // D
  int controls = 1;    // A
  int hidden = 0;      // 0: 2 * D
  int flows = 0;       // K planar flows (0: diagonal Gaussian)

  [[nodiscard]] int width() const { return hidden > 0 ? hidden : 2 * dims; }
  [[nodiscard]] int input_size() const { return 2 * dims + 1 + controls; }
  [[nodiscard]] int head_size() const { return 2 * latent_dim + flows * (2 * latent_dim + 1); }

  [[nodiscard]] json to_json() const {
    return json{{"latent_dim", latent_dim}, {"dims", dims}, {"controls", controls}, {"hidden", width()}, {"flows", flows}};
  }
  static EncoderSpec from_json(const json& j) {
    EncoderSpec s;
    s.latent_dim = j.at("latent_dim").get<int>();
    s.dims = j.at("dims").get<int>();
    s.controls = j.at("controls").get<int>();
    s.hidden = j.value("hidden", 0);
    s.flows = j.value("flows", 0);
    return s;
  }
};

// mu_bias seeds the mean head (e.g. the prior mean mapped back through
// softplus for expert components).
inline ad::ParamSet init_encoder_params(const EncoderSpec& s, Rng& rng, const Vec& mu_bias) {
  if (mu_bias.size() != s.latent_dim) throw ad::ContractError("init_encoder_params: mu_bias size");
  const int H = s.width();
  const int I = s.input_size();
  ad::ParamSet p;
  p.add_matrix("enc.wx", model::uniform_init(rng, 4 * H, I, H));
  p.add_matrix("enc.wh", model::uniform_init(rng, 4 * H, H, H));
  Vec b = Vec::Zero(4 * H);
  b.segment(H, H).setOnes();  // forget-gate bias
  p.add_vector("enc.b", b);
  const int O = s.head_size();
  Mat hw = model::uniform_init(rng, O, H, H);
  hw.topRows(2 * s.latent_dim) *= 0.1;
  p.add_matrix("enc.head_w", hw);
  Vec hb = Vec::Zero(O);
  hb.head(s.latent_dim) = mu_bias;
  p.add_vector("enc.head_b", hb);
  return p;
}

template <class T>
struct PlanarFlow {
  T u, w, b;  // u, w: L x 1; b: 1 x 1
};

template <class T>
struct Posterior {
  T mu;      // L x 1
  T logvar;  // L x 1, Sigma = exp(logvar)
  std::vector<PlanarFlow<T>> flows;
};

// u-hat = u + (m(w'u) - w'u) w / |w|^2 with m(x) = -1 + eps + softplus(x),
// so that u-hat' w >= -1 + eps.
template <class T>
T constrain_flow_u(const T& u, const T& w) {
  using namespace ad;
  const T wu = colsum(mul(w, u));
  const T ww = shift(colsum(square(w)), 1e-12);
  const T m = shift(softplus(wu), -1.0 + kFlowEpsilon);
  return add(u, mul(div(sub(m, wu), ww), w));
}

// Encoder input at measurement k: [zero-filled y, mask, gap to the preceding
// measurement time (t_{-1} = 0), control value]. Steps run latest to earliest.
template <class T>
Posterior<T> encode(const EncoderSpec& s, const ad::Bound<T>& p, const TrajectoryRecord& r, const TreatmentControl& c) {
  using namespace ad;
  if (r.size() == 0) throw ContractError("encode: record '" + r.id + "' has no measurement times");
  if (r.dims() != s.dims) throw ContractError("encode: record dimension differs from encoder");
  if (c.channels() != s.controls) throw ContractError("encode: control channel count differs from encoder");
  const int H = s.width();
  const int L = s.latent_dim;
  const T& wx = p("enc.wx");
  const T& wh = p("enc.wh");
  const T& b = p("enc.b");
  const T& any = wx;

  std::optional<T> h, cell;
  for (std::size_t n = r.size(); n-- > 0;) {
    Vec x(s.input_size());
    x.head(s.dims) = r.y.row(static_cast<Eigen::Index>(n)).transpose();
    x.segment(s.dims, s.dims) = r.mask.row(static_cast<Eigen::Index>(n)).transpose();
    x(2 * s.dims) = r.times[n] - (n > 0 ? r.times[n - 1] : 0.0);
    if (s.controls > 0) x.tail(s.controls) = c.signal.value(r.times[n]);
    T gates = affine(wx, lift(any, Mat(x)), b);
    if (h) gates = add(gates, matmul(wh, *h));
    const T ig = sigmoid(rows(gates, 0, H));
    const T fg = sigmoid(rows(gates, H, H));
    const T gg = tanh(rows(gates, 2 * H, H));
    const T og = sigmoid(rows(gates, 3 * H, H));
    cell = cell ? add(mul(fg, *cell), mul(ig, gg)) : mul(ig, gg);
    h = mul(og, tanh(*cell));
  }
  const T out = affine(p("enc.head_w"), *h, p("enc.head_b"));
  Posterior<T> q{rows(out, 0, L), rows(out, L, L), {}};
  Eigen::Index off = 2 * L;
  for (int k = 0; k < s.flows; ++k) {
    const T u = rows(out, off, L);
    const T w = rows(out, off + L, L);
    const T bk = row(out, off + 2 * L);
    off += 2 * L + 1;
    q.flows.push_back({constrain_flow_u(u, w), w, bk});
  }
  return q;
}

template <class T>
struct Transformed {
  T z0;       // L x S
  T log_det;  // 1 x S
};

// Planar flows z + u tanh(w'z + b) applied in order, then softplus on the
// first `expert_dim` components. log_det sums log|1 + u'psi| and the softplus
// log-Jacobians.
template <class T>
Transformed<T> transform_sample(const T& z_raw, const std::vector<PlanarFlow<T>>& flows, int expert_dim) {
  using namespace ad;
  const Mat& zv = value_of(z_raw);
  T z = z_raw;
  T log_det = lift(z_raw, Mat::Zero(1, zv.cols()));
  for (const auto& f : flows) {
    const T t = tanh(add(colsum(mul(f.w, z)), f.b));
    z = add(z, mul(f.u, t));
    const T uw = colsum(mul(f.u, f.w));
    const T dt = shift(neg(square(t)), 1.0);
    log_det = add(log_det, log(shift(mul(dt, uw), 1.0)));
  }
  if (expert_dim > 0) {
    const Eigen::Index L = zv.rows();
    const T ze = rows(z, 0, expert_dim);
    log_det = add(log_det, colsum(log_sigmoid(ze)));
    const T zp = softplus(ze);
    z = L > expert_dim ? stack({zp, rows(z, expert_dim, L - expert_dim)}) : zp;
  }
  return {z, log_det};
}

template <class T>
struct PosteriorDraw {
  T z0;     // L x S
  T log_q;  // 1 x S
};

// Reparameterized draw: z_raw = mu + exp(logvar / 2) eps, then transform.
// log q = Gaussian base density of z_raw minus all log-Jacobians.
template <class T>
PosteriorDraw<T> draw_posterior(const Posterior<T>& q, const Mat& eps, int expert_dim) {
  using namespace ad;
  const T log_scale = scale(0.5, q.logvar);
  const T z_raw = reparameterized_gaussian_sample(q.mu, log_scale, eps);
  const double L = static_cast<double>(eps.rows());
  Mat quad = (-0.5 * eps.array().square().colwise().sum()).matrix();
  quad.array() -= L * model::kHalfLog2Pi;
  const T base = sub(lift(q.mu, quad), sum(log_scale));
  const auto tr = transform_sample(z_raw, q.flows, expert_dim);
  return {tr.z0, sub(base, tr.log_det)};
}

// log p0(z0): expert prior on the first `expert_dim` rows, standard normal
// on the rest. Returns 1 x S.
template <class T>
T prior_logpdf(const T& z0, int expert_dim, pharmaco::PriorSetting setting) {
  using namespace ad;
  const Eigen::Index L = value_of(z0).rows();
  std::optional<T> lp;
  if (expert_dim > 0) lp = pharmaco::expert_prior_logpdf(rows(z0, 0, expert_dim), setting);
  if (L > expert_dim) {
    const T zm = rows(z0, expert_dim, L - expert_dim);
    const T g = shift(scale(-0.5, colsum(square(zm))), -static_cast<double>(L - expert_dim) * model::kHalfLog2Pi);
    lp = lp ? add(*lp, g) : g;
  }
  return *lp;
}

// Sample mean of log q - log p0.
template <class T>
T mc_kl(const T& log_q, const T& log_p0) {
  using namespace ad;
  const T d = sub(log_q, log_p0);
  return scale(1.0 / static_cast<double>(value_of(d).size()), sum(d));
}

inline double mc_kl(std::span<const double> log_q, std::span<const double> log_p0) {
  if (log_q.empty() || log_q.size() != log_p0.size()) throw ad::ContractError("mc_kl: need matching non-empty samples");
  double s = 0.0;
  for (std::size_t i = 0; i < log_q.size(); ++i) s += log_q[i] - log_p0[i];
  return s / static_cast<double>(log_q.size());
}

}  // namespace lhm::inference
