#include "nesy/neural.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace nesy::nn {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Tanh: return "tanh";
    case Activation::Relu: return "relu";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  if (s == "sigmoid") return Activation::Sigmoid;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

namespace {

Vec activate(Activation a, const Vec& z) {
  switch (a) {
    case Activation::Identity: return z;
    case Activation::Tanh: return z.array().tanh();
    case Activation::Relu: return z.array().max(0.0);
    case Activation::Sigmoid: return (1.0 / (1.0 + (-z.array()).exp())).matrix();
  }
  return z;
}

// d activation / d z evaluated elementwise, given z and the activation output.
Vec activation_slope(Activation a, const Vec& z, const Vec& out) {
  switch (a) {
    case Activation::Identity: return Vec::Ones(z.size());
    case Activation::Tanh: return (1.0 - out.array().square()).matrix();
    case Activation::Relu: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::Sigmoid: return (out.array() * (1.0 - out.array())).matrix();
  }
  return Vec::Ones(z.size());
}

void check_shapes(const std::vector<int>& sizes, const std::vector<Activation>& acts) {
  if (sizes.size() < 2) throw std::invalid_argument("an Mlp needs at least input and output widths");
  if (acts.size() != sizes.size() - 1) throw std::invalid_argument("one activation per layer required");
  for (int s : sizes)
    if (s < 1) throw std::invalid_argument("layer widths must be >= 1");
}

}  // namespace

MlpGradients& MlpGradients::operator+=(const MlpGradients& o) {
  if (o.weight.size() != weight.size()) throw std::invalid_argument("gradient shape mismatch");
  for (std::size_t l = 0; l < weight.size(); ++l) {
    weight[l] += o.weight[l];
    bias[l] += o.bias[l];
  }
  return *this;
}

MlpGradients& MlpGradients::operator*=(double s) {
  for (std::size_t l = 0; l < weight.size(); ++l) {
    weight[l] *= s;
    bias[l] *= s;
  }
  return *this;
}

bool MlpGradients::all_finite() const {
  for (std::size_t l = 0; l < weight.size(); ++l)
    if (!weight[l].allFinite() || !bias[l].allFinite()) return false;
  return true;
}

double MlpGradients::squared_norm() const {
  double s = 0.0;
  for (std::size_t l = 0; l < weight.size(); ++l) s += weight[l].squaredNorm() + bias[l].squaredNorm();
  return s;
}

Mlp::Mlp(std::vector<int> sizes, std::vector<Activation> activations) {
  check_shapes(sizes, activations);
  for (std::size_t l = 0; l + 1 < sizes.size(); ++l)
    layers_.push_back({Mat::Zero(sizes[l + 1], sizes[l]), Vec::Zero(sizes[l + 1]), activations[l]});
}

Mlp Mlp::glorot(std::vector<int> sizes, std::vector<Activation> activations, Rng& rng) {
  Mlp net(sizes, std::move(activations));
  for (auto& layer : net.layers_) {
    const double a = std::sqrt(6.0 / static_cast<double>(layer.weight.rows() + layer.weight.cols()));
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = a * (2.0 * uniform01(rng) - 1.0);
  }
  return net;
}

int Mlp::input_size() const { return layers_.empty() ? 0 : static_cast<int>(layers_.front().weight.cols()); }
int Mlp::output_size() const { return layers_.empty() ? 0 : static_cast<int>(layers_.back().weight.rows()); }

std::vector<int> Mlp::layer_sizes() const {
  std::vector<int> s;
  if (layers_.empty()) return s;
  s.push_back(input_size());
  for (const auto& l : layers_) s.push_back(static_cast<int>(l.weight.rows()));
  return s;
}

std::size_t Mlp::parameter_count() const {
  std::size_t c = 0;
  for (const auto& l : layers_) c += l.weight.size() + l.bias.size();
  return c;
}

Vec Mlp::parameters() const {
  Vec p(parameter_count());
  Eigen::Index k = 0;
  for (const auto& l : layers_) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) p(k++) = l.weight(r, c);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) p(k++) = l.bias(r);
  }
  return p;
}

void Mlp::set_parameters(const Vec& p) {
  if (static_cast<std::size_t>(p.size()) != parameter_count()) throw std::invalid_argument("parameter count mismatch");
  Eigen::Index k = 0;
  for (auto& l : layers_) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = p(k++);
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) l.bias(r) = p(k++);
  }
}

MlpGradients Mlp::zero_gradients() const {
  MlpGradients g;
  for (const auto& l : layers_) {
    g.weight.push_back(Mat::Zero(l.weight.rows(), l.weight.cols()));
    g.bias.push_back(Vec::Zero(l.bias.size()));
  }
  return g;
}

bool Mlp::all_finite() const {
  for (const auto& l : layers_)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

bool operator==(const Mlp& a, const Mlp& b) {
  if (a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t l = 0; l < a.layers_.size(); ++l) {
    const auto& x = a.layers_[l];
    const auto& y = b.layers_[l];
    if (x.activation != y.activation || x.weight.rows() != y.weight.rows() || x.weight.cols() != y.weight.cols() ||
        x.weight != y.weight || x.bias != y.bias)
      return false;
  }
  return true;
}

ForwardCache forward_cached(const Mlp& net, const Vec& input) {
  if (net.layers().empty()) throw std::invalid_argument("empty network");
  if (input.size() != net.input_size())
    throw std::invalid_argument("input width " + std::to_string(input.size()) + " != network input width " +
                                std::to_string(net.input_size()));
  ForwardCache c;
  Vec x = input;
  for (const auto& l : net.layers()) {
    c.inputs.push_back(x);
    Vec z = l.weight * x + l.bias;
    x = activate(l.activation, z);
    c.pre.push_back(std::move(z));
  }
  c.output = std::move(x);
  return c;
}

Vec forward(const Mlp& net, const Vec& input) {
  if (net.layers().empty()) throw std::invalid_argument("empty network");
  if (input.size() != net.input_size())
    throw std::invalid_argument("input width " + std::to_string(input.size()) + " != network input width " +
                                std::to_string(net.input_size()));
  Vec x = input;
  for (const auto& l : net.layers()) x = activate(l.activation, l.weight * x + l.bias);
  return x;
}

BackwardResult backward(const Mlp& net, const ForwardCache& cache, const Vec& upstream) {
  const auto& layers = net.layers();
  if (cache.pre.size() != layers.size()) throw std::invalid_argument("forward cache does not match network");
  if (upstream.size() != net.output_size()) throw std::invalid_argument("upstream gradient width mismatch");
  BackwardResult r;
  r.params.weight.resize(layers.size());
  r.params.bias.resize(layers.size());
  Vec g = upstream;
  for (std::size_t l = layers.size(); l-- > 0;) {
    const Vec out = l + 1 < layers.size() ? cache.inputs[l + 1] : cache.output;
    Vec dz = g.cwiseProduct(activation_slope(layers[l].activation, cache.pre[l], out));
    r.params.weight[l] = dz * cache.inputs[l].transpose();
    r.params.bias[l] = dz;
    g = layers[l].weight.transpose() * dz;
  }
  r.input = std::move(g);
  return r;
}

Vec flatten(const MlpGradients& g) {
  std::size_t count = 0;
  for (std::size_t l = 0; l < g.weight.size(); ++l) count += g.weight[l].size() + g.bias[l].size();
  Vec p(count);
  Eigen::Index k = 0;
  for (std::size_t l = 0; l < g.weight.size(); ++l) {
    for (Eigen::Index r = 0; r < g.weight[l].rows(); ++r)
      for (Eigen::Index c = 0; c < g.weight[l].cols(); ++c) p(k++) = g.weight[l](r, c);
    for (Eigen::Index r = 0; r < g.bias[l].size(); ++r) p(k++) = g.bias[l](r);
  }
  return p;
}

// ---------------------------------------------------------------------------

Adam::Adam(const Mlp& net, Options opts)
    : opts_(opts), m_(Vec::Zero(net.parameter_count())), v_(Vec::Zero(net.parameter_count())) {}

void Adam::step(Mlp& net, const MlpGradients& grads) {
  if (!grads.all_finite()) throw std::domain_error("non-finite gradient; parameters left unchanged");
  const Vec g = flatten(grads);
  if (g.size() != m_.size()) throw std::invalid_argument("gradient shape does not match optimizer state");
  const double b1 = opts_.beta1, b2 = opts_.beta2;
  Vec m = b1 * m_ + (1.0 - b1) * g;
  Vec v = b2 * v_ + (1.0 - b2) * g.cwiseProduct(g);
  const long t = t_ + 1;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  Vec update = (m / c1).array() / ((v / c2).array().sqrt() + opts_.epsilon);
  Vec p = net.parameters() - opts_.learning_rate * update;
  if (!p.allFinite()) throw std::domain_error("update produced non-finite parameters");
  net.set_parameters(p);
  m_ = std::move(m);
  v_ = std::move(v);
  t_ = t;
}

// ---------------------------------------------------------------------------

ScalarLoss squared_error_loss(Vec target) {
  return {[target](const Vec& y) { return 0.5 * (y - target).squaredNorm(); },
          [target](const Vec& y) -> Vec { return y - target; }};
}

ScalarLoss linear_loss(Vec coeffs) {
  return {[coeffs](const Vec& y) { return coeffs.dot(y); }, [coeffs](const Vec&) -> Vec { return coeffs; }};
}

GradCheckReport gradient_check(const Mlp& net, const ScalarLoss& loss, const Vec& input, double h) {
  GradCheckReport rep;
  const auto cache = forward_cached(net, input);
  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    if (net.layers()[l].activation != Activation::Relu) continue;
    // A kink within reach of the perturbation makes central differences meaningless.
    const double reach = h * (1.0 + cache.inputs[l].lpNorm<1>()) * 10.0;
    if ((cache.pre[l].array().abs() < reach).any()) rep.comparable = false;
  }
  const Vec analytic = flatten(backward(net, cache, loss.gradient(cache.output)).params);
  Mlp probe = net;
  Vec p = net.parameters();
  for (Eigen::Index k = 0; k < p.size(); ++k) {
    const double saved = p(k);
    p(k) = saved + h;
    probe.set_parameters(p);
    const double up = loss.value(forward(probe, input));
    p(k) = saved - h;
    probe.set_parameters(p);
    const double down = loss.value(forward(probe, input));
    p(k) = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double denom = std::max({std::abs(analytic(k)), std::abs(numeric), 1e-6});
    const double rel = std::abs(analytic(k) - numeric) / denom;
    if (rel > rep.max_relative_error) {
      rep.max_relative_error = rel;
      rep.worst_index = static_cast<std::size_t>(k);
    }
    ++rep.checked;
  }
  return rep;
}

// ---------------------------------------------------------------------------

namespace {

void write_le(std::ofstream& os, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double read_le(std::ifstream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("truncated checkpoint");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::filesystem::path sidecar(const std::filesystem::path& p) { return std::filesystem::path(p.string() + ".json"); }

}  // namespace

void save_checkpoint(const std::vector<std::pair<std::string, Mlp>>& nets, const std::filesystem::path& path) {
  nlohmann::json meta;
  meta["format"] = "nesy-mlp-v1";
  meta["dtype"] = "float64";
  meta["byte_order"] = "little";
  meta["nets"] = nlohmann::json::array();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  std::size_t offset = 0;
  for (const auto& [name, net] : nets) {
    std::vector<std::string> acts;
    for (const auto& l : net.layers()) acts.push_back(to_string(l.activation));
    const Vec p = net.parameters();
    meta["nets"].push_back({{"name", name},
                            {"layer_sizes", net.layer_sizes()},
                            {"activations", acts},
                            {"offset", offset},
                            {"count", p.size()}});
    for (Eigen::Index k = 0; k < p.size(); ++k) write_le(os, p(k));
    offset += static_cast<std::size_t>(p.size());
  }
  std::ofstream ms(sidecar(path));
  if (!ms) throw std::runtime_error("cannot write " + sidecar(path).string());
  ms << meta.dump(2) << '\n';
}

std::vector<std::pair<std::string, Mlp>> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream ms(sidecar(path));
  if (!ms) throw std::runtime_error("cannot read " + sidecar(path).string());
  const auto meta = nlohmann::json::parse(ms);
  if (meta.value("format", "") != "nesy-mlp-v1") throw std::runtime_error("unknown checkpoint format");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::pair<std::string, Mlp>> out;
  for (const auto& n : meta.at("nets")) {
    std::vector<Activation> acts;
    for (const auto& a : n.at("activations")) acts.push_back(activation_from_string(a.get<std::string>()));
    Mlp net(n.at("layer_sizes").get<std::vector<int>>(), acts);
    const auto count = n.at("count").get<std::size_t>();
    if (count != net.parameter_count()) throw std::runtime_error("checkpoint count does not match shapes");
    is.seekg(static_cast<std::streamoff>(n.at("offset").get<std::size_t>() * 8));
    Vec p(static_cast<Eigen::Index>(count));
    for (std::size_t k = 0; k < count; ++k) p(static_cast<Eigen::Index>(k)) = read_le(is);
    net.set_parameters(p);
    out.emplace_back(n.at("name").get<std::string>(), std::move(net));
  }
  return out;
}

}  // namespace nesy::nn
