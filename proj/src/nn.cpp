#include "lqrppg/nn.hpp"

#include "lqrppg/errors.hpp"

#include <cmath>

namespace lqrppg {

namespace {

constexpr int kParamFormatVersion = 1;

template <class S>
ad::Mat<S> as(const Eigen::MatrixXd& m) {
  return m.cast<S>();
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

template <class S>
ad::Parameter<S>& ParamStore<S>::add(const std::string& name, ad::Mat<S> value) {
  require(!contains(name), "param store: duplicate parameter " + name);
  auto p = std::make_unique<ad::Parameter<S>>();
  p->name = name;
  p->grad = ad::Mat<S>::Zero(value.rows(), value.cols());
  p->value = std::move(value);
  index_.emplace(name, params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

template <class S>
ad::Parameter<S>& ParamStore<S>::get(const std::string& name) {
  const auto it = index_.find(name);
  require(it != index_.end(), "param store: no parameter " + name);
  return *params_[it->second];
}

template <class S>
const ad::Parameter<S>& ParamStore<S>::get(const std::string& name) const {
  const auto it = index_.find(name);
  require(it != index_.end(), "param store: no parameter " + name);
  return *params_[it->second];
}

template <class S>
void ParamStore<S>::zero_grad() {
  for (auto& p : params_) p->grad = ad::Mat<S>::Zero(p->value.rows(), p->value.cols());
}

template <class S>
std::size_t param_count(const ParamStore<S>& store) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < store.size(); ++i) n += static_cast<std::size_t>(store.at(i).value.size());
  return n;
}

// ---------------------------------------------------------------------------
// Initializers

Eigen::MatrixXd fan_in_uniform(Eigen::Index rows, Eigen::Index cols, double fan_in, Rng& rng) {
  require(fan_in > 0.0, "fan_in_uniform: fan_in must be positive");
  const double bound = 1.0 / std::sqrt(fan_in);
  std::uniform_real_distribution<double> u(-bound, bound);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = u(rng);
  return m;
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, double sd, Rng& rng) {
  std::normal_distribution<double> n(0.0, sd);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = n(rng);
  return m;
}

// ---------------------------------------------------------------------------
// Linear / Conv1d

template <class S>
void Linear::init(ParamStore<S>& store, Rng& rng) const {
  store.add(prefix + ".w", as<S>(fan_in_uniform(in, out, in, rng)));
  if (bias) store.add(prefix + ".b", as<S>(fan_in_uniform(1, out, in, rng)));
}

template <class S>
ad::Var<S> Linear::forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const {
  require(x.cols() == in, prefix + ": expected " + std::to_string(in) + " input features");
  ad::Var<S> y = ad::matmul(x, use(tape, store, prefix + ".w"));
  return bias ? ad::add_row(y, use(tape, store, prefix + ".b")) : y;
}

template <class S>
void Conv1d::init(ParamStore<S>& store, Rng& rng) const {
  const double fan_in = static_cast<double>(in) * kernel;
  store.add(prefix + ".w", as<S>(fan_in_uniform(static_cast<Eigen::Index>(in) * kernel, out, fan_in, rng)));
  store.add(prefix + ".b", as<S>(fan_in_uniform(1, out, fan_in, rng)));
}

template <class S>
ad::Var<S> Conv1d::forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const {
  require(x.cols() == in, prefix + ": expected " + std::to_string(in) + " input channels");
  return ad::conv1d(x, use(tape, store, prefix + ".w"), use(tape, store, prefix + ".b"), kernel, dilation, padding);
}

// ---------------------------------------------------------------------------
// Dilated block

int DilatedBlockCfg::receptive_field() const {
  int rf = 1;
  for (int i = 0; i < layers; ++i) rf += (kernel - 1) * dilations[i];
  return rf;
}

void DilatedBlockCfg::validate() const {
  require(layers >= 1, "dilated block: need at least one layer");
  require(kernel >= 1 && kernel % 2 == 1, "dilated block: kernel must be odd");
  require(static_cast<int>(dilations.size()) == layers, "dilated block: one dilation per layer");
  for (int d : dilations) require(d >= 1, "dilated block: dilations must be >= 1");
  require(layers == 1 || hidden >= 1, "dilated block: hidden width must be >= 1");
}

Conv1d DilatedConvBlock::layer(int i) const {
  Conv1d c;
  c.prefix = prefix + ".conv" + std::to_string(i);
  c.in = i == 0 ? 1 : cfg.hidden;
  c.out = i == cfg.layers - 1 ? 1 : cfg.hidden;
  c.kernel = cfg.kernel;
  c.dilation = cfg.dilations[i];
  c.padding = ad::Padding::same;
  return c;
}

template <class S>
void DilatedConvBlock::init(ParamStore<S>& store, Rng& rng, DilatedInit mode, double perturb) const {
  cfg.validate();
  const int k = cfg.kernel;
  const int j = (k - 1) / 2;  // center tap
  if (mode == DilatedInit::identity && cfg.layers > 1)
    require(cfg.hidden >= 2, "dilated block: identity init needs hidden >= 2");
  for (int i = 0; i < cfg.layers; ++i) {
    const Conv1d c = layer(i);
    const double fan_in = static_cast<double>(c.in) * k;
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(c.in) * k, c.out);
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(1, c.out);
    if (mode == DilatedInit::fan_in) {
      w = fan_in_uniform(w.rows(), w.cols(), fan_in, rng);
      b = fan_in_uniform(1, c.out, fan_in, rng);
    } else if (mode == DilatedInit::identity) {
      const bool first = i == 0, last = i == cfg.layers - 1;
      if (first && last) {
        w(j, 0) = 1.0;
      } else if (first) {
        w(j, 0) = 1.0;
        w(j, 1) = -1.0;
      } else {
        w(0 * k + j, 0) = 1.0;
        w(1 * k + j, 0) = -1.0;
        if (!last) {
          w(0 * k + j, 1) = -1.0;
          w(1 * k + j, 1) = 1.0;
        }
      }
      if (perturb != 0.0) w += perturb * fan_in_uniform(w.rows(), w.cols(), fan_in, rng);
    }
    store.add(c.prefix + ".w", as<S>(w));
    store.add(c.prefix + ".b", as<S>(b));
  }
}

template <class S>
ad::Var<S> DilatedConvBlock::forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const {
  require(x.cols() == 1, prefix + ": input must be T x 1");
  ad::Var<S> h = x;
  for (int i = 0; i < cfg.layers; ++i) {
    h = layer(i).forward(tape, store, h);
    if (i + 1 < cfg.layers) h = ad::gelu(h);
  }
  ad::check_finite(h, prefix);
  return h;
}

// ---------------------------------------------------------------------------
// Bi-Mamba

void BiMambaCfg::validate() const {
  require(d >= 1 && s >= 1 && k >= 1 && e >= 1, "bimamba: d, s, k, e must be >= 1");
}

template <class S>
void BiMamba::init(ParamStore<S>& store, Rng& rng) const {
  cfg.validate();
  const int d = cfg.d, E = cfg.inner(), N = cfg.s, R = cfg.dt_rank(), k = cfg.k;
  std::uniform_real_distribution<double> log_dt(std::log(1e-3), std::log(1e-1));
  for (const char* dir : {"fwd", "bwd"}) {
    if (cfg.tied && std::string(dir) == "bwd") break;
    const std::string p = prefix + "." + dir + ".";
    store.add(p + "in_x", as<S>(fan_in_uniform(d, E, d, rng)));
    store.add(p + "in_z", as<S>(fan_in_uniform(d, E, d, rng)));
    store.add(p + "conv_w", as<S>(fan_in_uniform(k, E, k, rng)));
    store.add(p + "conv_b", as<S>(fan_in_uniform(1, E, k, rng)));
    store.add(p + "x_dt", as<S>(fan_in_uniform(E, R, E, rng)));
    store.add(p + "x_B", as<S>(fan_in_uniform(E, N, E, rng)));
    store.add(p + "x_C", as<S>(fan_in_uniform(E, N, E, rng)));
    store.add(p + "dt_w", as<S>(fan_in_uniform(R, E, R, rng)));
    // softplus(dt_b) spans [1e-3, 1e-1] log-uniformly.
    Eigen::MatrixXd dt_b(1, E);
    for (int i = 0; i < E; ++i) {
      const double dt = std::max(std::exp(log_dt(rng)), 1e-4);
      dt_b(0, i) = dt + std::log(-std::expm1(-dt));
    }
    store.add(p + "dt_b", as<S>(dt_b));
    Eigen::MatrixXd a_log(E, N);
    for (int n = 0; n < N; ++n) a_log.col(n).setConstant(std::log(static_cast<double>(n + 1)));
    store.add(p + "A_log", as<S>(a_log));
    store.add(p + "D", ad::Mat<S>::Ones(1, E));
    store.add(p + "out", as<S>(fan_in_uniform(E, d, E, rng)));
  }
  store.add(prefix + ".norm.gamma", ad::Mat<S>::Ones(1, d));
  store.add(prefix + ".norm.beta", ad::Mat<S>::Zero(1, d));
}

template <class S>
void BiMamba::zero_output(ParamStore<S>& store) const {
  for (const char* dir : {"fwd", "bwd"}) {
    const std::string name = prefix + "." + dir + ".out";
    if (store.contains(name)) store.get(name).value.setZero();
  }
}

template <class S>
ad::Var<S> BiMamba::direction(ad::Tape<S>& tape, ParamStore<S>& store, const std::string& dir,
                              const ad::Var<S>& x) const {
  const std::string p = prefix + "." + dir + ".";
  auto P = [&](const char* field) { return use(tape, store, p + field); };
  const ad::Var<S> xi = ad::matmul(x, P("in_x"));
  const ad::Var<S> z = ad::matmul(x, P("in_z"));
  const ad::Var<S> u = ad::silu(ad::depthwise_causal_conv1d(xi, P("conv_w"), P("conv_b")));
  const ad::Var<S> dt_low = ad::matmul(u, P("x_dt"));
  const ad::Var<S> b = ad::matmul(u, P("x_B"));
  const ad::Var<S> c = ad::matmul(u, P("x_C"));
  const ad::Var<S> delta = ad::softplus(ad::add_row(ad::matmul(dt_low, P("dt_w")), P("dt_b")));
  const ad::Var<S> y = ad::selective_scan(u, delta, P("A_log"), b, c, P("D"));
  const ad::Var<S> out = ad::matmul(ad::mul(y, ad::silu(z)), P("out"));
  ad::check_finite(out, prefix + "." + dir);
  return out;
}

template <class S>
ad::Var<S> BiMamba::bidir(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const {
  require(x.cols() == cfg.d, prefix + ": expected " + std::to_string(cfg.d) + " features");
  require(x.rows() >= 1, prefix + ": empty sequence");
  const ad::Var<S> f = direction(tape, store, "fwd", x);
  const ad::Var<S> b = ad::reverse_rows(direction(tape, store, cfg.tied ? "fwd" : "bwd", ad::reverse_rows(x)));
  return ad::add(f, b);
}

template <class S>
ad::Var<S> BiMamba::forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const {
  const ad::Var<S> y = bidir(tape, store, x);
  const ad::Var<S> gamma = use(tape, store, prefix + ".norm.gamma");
  const ad::Var<S> beta = use(tape, store, prefix + ".norm.beta");
  const ad::Var<S> n = cfg.d == 1 ? ad::col_norm(y, gamma, beta) : ad::row_norm(y, gamma, beta);
  const ad::Var<S> out = ad::add(x, n);
  ad::check_finite(out, prefix);
  return out;
}

// ---------------------------------------------------------------------------
// Conv2d / ChannelNorm / PositionalEncoding

template <class S>
void Conv2d::init(ParamStore<S>& store, Rng& rng) const {
  const double fan_in = static_cast<double>(in) * kernel * kernel;
  store.add(prefix + ".w",
            as<S>(fan_in_uniform(static_cast<Eigen::Index>(in) * kernel * kernel, out, fan_in, rng)));
  store.add(prefix + ".b", as<S>(fan_in_uniform(1, out, fan_in, rng)));
}

template <class S>
ad::Var<S> Conv2d::forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x, int frames, int height,
                           int width) const {
  require(x.cols() == in, prefix + ": expected " + std::to_string(in) + " input channels");
  return ad::conv2d(x, use(tape, store, prefix + ".w"), use(tape, store, prefix + ".b"), frames, height, width,
                    kernel, stride);
}

template <class S>
void ChannelNorm::init(ParamStore<S>& store) const {
  store.add(prefix + ".gamma", ad::Mat<S>::Ones(1, channels));
  store.add(prefix + ".beta", ad::Mat<S>::Zero(1, channels));
}

template <class S>
ad::Var<S> ChannelNorm::forward(ad::Tape<S>& tape, ParamStore<S>& store, const ad::Var<S>& x) const {
  return ad::col_norm(x, use(tape, store, prefix + ".gamma"), use(tape, store, prefix + ".beta"));
}

template <class S>
void PositionalEncoding::init(ParamStore<S>& store, Rng& rng) const {
  store.add(name, as<S>(gaussian(frames, dim, 0.02, rng)));
}

template <class S>
ad::Var<S> PositionalEncoding::forward(ad::Tape<S>& tape, ParamStore<S>& store, int T, int d) const {
  const ad::Parameter<S>& p = store.get(name);
  require(p.value.rows() == T && p.value.cols() == d,
          "positional encoding: stored " + std::to_string(p.value.rows()) + "x" + std::to_string(p.value.cols()) +
              ", requested " + std::to_string(T) + "x" + std::to_string(d));
  return use(tape, store, name);
}

// ---------------------------------------------------------------------------
// Checkpoints

template <class S>
void save_params(const ParamStore<S>& store, const std::filesystem::path& stem, const io::json& meta) {
  std::vector<float> payload;
  io::json arrays = io::json::array();
  for (std::size_t i = 0; i < store.size(); ++i) {
    const ad::Parameter<S>& p = store.at(i);
    arrays.push_back({{"name", p.name}, {"shape", {p.value.rows(), p.value.cols()}}, {"offset", payload.size()}});
    for (Eigen::Index j = 0; j < p.value.size(); ++j) payload.push_back(static_cast<float>(p.value.data()[j]));
  }
  io::write_f32(std::filesystem::path(stem.string() + ".bin"), payload);
  io::write_json(std::filesystem::path(stem.string() + ".json"),
                 {{"version", kParamFormatVersion}, {"dtype", "float32"}, {"count", payload.size()},
                  {"arrays", arrays}, {"meta", meta}});
}

template <class S>
ParamStore<S> load_params(const std::filesystem::path& stem, io::json* meta) {
  const std::filesystem::path manifest(stem.string() + ".json");
  const io::json j = io::read_json(manifest);
  ParamStore<S> store;
  try {
    if (j.at("version").get<int>() != kParamFormatVersion)
      throw DataError("parameter checkpoint version mismatch in " + manifest.string());
    const auto count = j.at("count").get<std::size_t>();
    const std::vector<float> payload = io::read_f32(std::filesystem::path(stem.string() + ".bin"), count);
    for (const auto& a : j.at("arrays")) {
      const auto rows = a.at("shape").at(0).get<Eigen::Index>();
      const auto cols = a.at("shape").at(1).get<Eigen::Index>();
      const auto off = a.at("offset").get<std::size_t>();
      if (rows < 0 || cols < 0 || off + static_cast<std::size_t>(rows * cols) > payload.size())
        throw DataError("corrupt parameter manifest " + manifest.string());
      ad::Mat<S> v(rows, cols);
      for (Eigen::Index i = 0; i < rows * cols; ++i) v.data()[i] = static_cast<S>(payload[off + i]);
      store.add(a.at("name").get<std::string>(), std::move(v));
    }
    if (meta != nullptr) *meta = j.value("meta", io::json::object());
  } catch (const io::json::exception& e) {
    throw DataError("corrupt parameter manifest " + manifest.string() + ": " + e.what());
  } catch (const InvalidArgument& e) {
    throw DataError("corrupt parameter manifest " + manifest.string() + ": " + e.what());
  }
  return store;
}

template <class S>
void assign_params(ParamStore<S>& dst, const ParamStore<S>& src) {
  for (std::size_t i = 0; i < src.size(); ++i) {
    const ad::Parameter<S>& p = src.at(i);
    ad::Parameter<S>& q = dst.get(p.name);
    require(q.value.rows() == p.value.rows() && q.value.cols() == p.value.cols(),
            "assign_params: shape mismatch for " + p.name);
    q.value = p.value;
  }
}

// ---------------------------------------------------------------------------

#define LQRPPG_NN_INSTANTIATE(S)                                                                               \
  template class ParamStore<S>;                                                                                \
  template std::size_t param_count(const ParamStore<S>&);                                                      \
  template void Linear::init(ParamStore<S>&, Rng&) const;                                                      \
  template ad::Var<S> Linear::forward(ad::Tape<S>&, ParamStore<S>&, const ad::Var<S>&) const;                  \
  template void Conv1d::init(ParamStore<S>&, Rng&) const;                                                      \
  template ad::Var<S> Conv1d::forward(ad::Tape<S>&, ParamStore<S>&, const ad::Var<S>&) const;                  \
  template void DilatedConvBlock::init(ParamStore<S>&, Rng&, DilatedInit, double) const;                       \
  template ad::Var<S> DilatedConvBlock::forward(ad::Tape<S>&, ParamStore<S>&, const ad::Var<S>&) const;        \
  template void BiMamba::init(ParamStore<S>&, Rng&) const;                                                     \
  template void BiMamba::zero_output(ParamStore<S>&) const;                                                    \
  template ad::Var<S> BiMamba::direction(ad::Tape<S>&, ParamStore<S>&, const std::string&, const ad::Var<S>&)  \
      const;                                                                                                   \
  template ad::Var<S> BiMamba::bidir(ad::Tape<S>&, ParamStore<S>&, const ad::Var<S>&) const;                   \
  template ad::Var<S> BiMamba::forward(ad::Tape<S>&, ParamStore<S>&, const ad::Var<S>&) const;                 \
  template void Conv2d::init(ParamStore<S>&, Rng&) const;                                                      \
  template ad::Var<S> Conv2d::forward(ad::Tape<S>&, ParamStore<S>&, const ad::Var<S>&, int, int, int) const;   \
  template void ChannelNorm::init(ParamStore<S>&) const;                                                       \
  template ad::Var<S> ChannelNorm::forward(ad::Tape<S>&, ParamStore<S>&, const ad::Var<S>&) const;             \
  template void PositionalEncoding::init(ParamStore<S>&, Rng&) const;                                          \
  template ad::Var<S> PositionalEncoding::forward(ad::Tape<S>&, ParamStore<S>&, int, int) const;               \
  template void save_params(const ParamStore<S>&, const std::filesystem::path&, const io::json&);              \
  template ParamStore<S> load_params(const std::filesystem::path&, io::json*);                                 \
  template void assign_params(ParamStore<S>&, const ParamStore<S>&);

LQRPPG_NN_INSTANTIATE(float)
LQRPPG_NN_INSTANTIATE(double)

#undef LQRPPG_NN_INSTANTIATE

}  // namespace lqrppg
