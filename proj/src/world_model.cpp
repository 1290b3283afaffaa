#include "nesy/world_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <queue>
#include <sstream>

namespace nesy::world {

namespace {

void check_square(const Adjacency& adj) {
  for (const auto& row : adj)
    if (row.size() != adj.size()) throw std::invalid_argument("adjacency matrix is not square");
}

// Returns one directed cycle among `nodes` (all of which have remaining
// in-edges inside the set), as a node sequence.
std::vector<int> find_cycle(const Adjacency& adj, const std::vector<bool>& alive) {
  const int n = static_cast<int>(adj.size());
  std::vector<int> color(n, 0), parent(n, -1);
  std::vector<int> cycle;
  std::function<bool(int)> dfs = [&](int u) {
    color[u] = 1;
    for (int v = 0; v < n; ++v) {
      if (!adj[u][v] || !alive[v]) continue;
      if (color[v] == 1) {
        for (int w = u; w != v; w = parent[w]) cycle.push_back(w);
        cycle.push_back(v);
        std::reverse(cycle.begin(), cycle.end());
        return true;
      }
      if (color[v] == 0) {
        parent[v] = u;
        if (dfs(v)) return true;
      }
    }
    color[u] = 2;
    return false;
  };
  for (int s = 0; s < n; ++s)
    if (alive[s] && color[s] == 0 && dfs(s)) break;
  return cycle;
}

}  // namespace

std::vector<int> topological_order(const Adjacency& adj) {
  check_square(adj);
  const int n = static_cast<int>(adj.size());
  std::vector<int> indeg(n, 0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) indeg[j] += adj[i][j] ? 1 : 0;
  std::priority_queue<int, std::vector<int>, std::greater<>> ready;
  for (int i = 0; i < n; ++i)
    if (indeg[i] == 0) ready.push(i);
  std::vector<int> order;
  std::vector<bool> alive(n, true);
  while (!ready.empty()) {
    int u = ready.top();
    ready.pop();
    order.push_back(u);
    alive[u] = false;
    for (int v = 0; v < n; ++v)
      if (adj[u][v] && --indeg[v] == 0) ready.push(v);
  }
  if (static_cast<int>(order.size()) != n) {
    auto cycle = find_cycle(adj, alive);
    std::ostringstream os;
    os << "graph has a cycle:";
    for (int v : cycle) os << ' ' << v << " ->";
    os << ' ' << cycle.front();
    throw std::invalid_argument(os.str());
  }
  return order;
}

bool is_acyclic(const Adjacency& adj) {
  check_square(adj);
  try {
    topological_order(adj);
    return true;
  } catch (const std::invalid_argument&) {
    return false;
  }
}

// ---------------------------------------------------------------------------
// Dag

Dag::Dag(int n) {
  if (n < 0) throw std::invalid_argument("negative node count");
  adj_.assign(n, std::vector<std::uint8_t>(n, 0));
}

Dag::Dag(Adjacency adj) : adj_(std::move(adj)) {
  check_square(adj_);
  for (std::size_t i = 0; i < adj_.size(); ++i) {
    if (adj_[i][i]) throw std::invalid_argument("self loop on node " + std::to_string(i));
    for (auto& v : adj_[i]) v = v ? 1 : 0;
  }
  topological_order(adj_);
}

int Dag::edge_count() const {
  int c = 0;
  for (const auto& row : adj_)
    for (auto v : row) c += v;
  return c;
}

std::vector<std::pair<int, int>> Dag::edges() const {
  std::vector<std::pair<int, int>> e;
  for (int i = 0; i < n(); ++i)
    for (int j = 0; j < n(); ++j)
      if (adj_[i][j]) e.emplace_back(i, j);
  return e;
}

std::vector<int> Dag::parents(int j) const {
  std::vector<int> p;
  for (int i = 0; i < n(); ++i)
    if (adj_[i][j]) p.push_back(i);
  return p;
}

std::uint32_t Dag::parent_mask(int j) const {
  if (n() > 32) throw std::invalid_argument("parent_mask needs n <= 32");
  std::uint32_t m = 0;
  for (int i = 0; i < n(); ++i)
    if (adj_[i][j]) m |= 1u << i;
  return m;
}

void Dag::add_edge(int i, int j) {
  if (i < 0 || j < 0 || i >= n() || j >= n()) throw std::out_of_range("edge endpoint out of range");
  if (i == j) throw std::invalid_argument("self loop on node " + std::to_string(i));
  adj_[i][j] = 1;
  if (!is_acyclic(adj_)) {
    adj_[i][j] = 0;
    throw std::invalid_argument("edge " + std::to_string(i) + " -> " + std::to_string(j) + " creates a cycle");
  }
}

void WeightedSem::validate() const {
  const int n = dag.n();
  if (weights.rows() != n || weights.cols() != n) throw std::invalid_argument("weight matrix shape mismatch");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw std::invalid_argument("noise std must be >= 0");
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (!std::isfinite(weights(i, j))) throw std::invalid_argument("non-finite weight");
      if ((weights(i, j) != 0.0) != dag.has_edge(i, j))
        throw std::invalid_argument("weight support differs from edge set at (" + std::to_string(i) + "," +
                                    std::to_string(j) + ")");
    }
}

void StateDescription::validate() const {
  const int n = adjacency.n();
  if (static_cast<int>(node_sequence.size()) != n) throw std::invalid_argument("node sequence length mismatch");
  if (static_cast<int>(node_values.size()) != n) throw std::invalid_argument("node value count mismatch");
  std::vector<int> pos(n, -1);
  for (int k = 0; k < n; ++k) {
    int v = node_sequence[k];
    if (v < 0 || v >= n || pos[v] >= 0) throw std::invalid_argument("node sequence is not a permutation");
    pos[v] = k;
  }
  for (auto [i, j] : adjacency.edges())
    if (pos[i] > pos[j]) throw std::invalid_argument("node sequence is not a topological order");
}

// ---------------------------------------------------------------------------
// Sampling

Dag sample_er_graph(int n, double edge_prob, Rng& rng) {
  if (n < 1) throw std::invalid_argument("node count must be >= 1");
  if (!(edge_prob >= 0.0 && edge_prob <= 1.0)) throw std::invalid_argument("edge probability outside [0,1]");
  std::vector<int> perm(n);
  for (int i = 0; i < n; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  Adjacency adj(n, std::vector<std::uint8_t>(n, 0));
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      if (uniform01(rng) < edge_prob) adj[perm[a]][perm[b]] = 1;
  return Dag(std::move(adj));
}

WeightedSem assign_weights(const Dag& dag, double low, double high, Rng& rng, double noise_std, double dead_zone) {
  if (!(low < high)) throw std::invalid_argument("empty weight interval");
  if (low < dead_zone) throw std::invalid_argument("weight interval enters the dead zone around 0");
  WeightedSem sem{dag, Eigen::MatrixXd::Zero(dag.n(), dag.n()), noise_std};
  for (auto [i, j] : dag.edges()) {
    double mag = low + (high - low) * uniform01(rng);
    double sign = uniform01(rng) < 0.5 ? -1.0 : 1.0;
    sem.weights(i, j) = sign * mag;
  }
  sem.validate();
  return sem;
}

Dataset sample_observations(const WeightedSem& sem, Eigen::Index count, Rng& rng) {
  sem.validate();
  if (count < 1) throw std::invalid_argument("observation count must be >= 1");
  const int n = sem.dag.n();
  const auto order = topological_order(sem.dag);
  std::vector<std::vector<int>> parents(n);
  for (int j = 0; j < n; ++j) parents[j] = sem.dag.parents(j);
  Dataset d;
  d.x.resize(count, n);
  for (int j = 0; j < n; ++j) d.names.push_back("x" + std::to_string(j));
  std::normal_distribution<double> noise(0.0, 1.0);
  for (Eigen::Index r = 0; r < count; ++r) {
    for (int j : order) {
      double v = sem.noise_std * noise(rng);
      for (int i : parents[j]) v += sem.weights(i, j) * d.x(r, i);
      d.x(r, j) = v;
    }
  }
  return d;
}

Eigen::MatrixXd analytic_covariance(const WeightedSem& sem) {
  const int n = sem.dag.n();
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n) - sem.weights.transpose();
  Eigen::MatrixXd inv = a.inverse();
  return sem.noise_std * sem.noise_std * inv * inv.transpose();
}

// ---------------------------------------------------------------------------
// Scoring

LinearGaussianScorer::LinearGaussianScorer(const Dataset& data) : n_(data.n()), rows_(data.rows()) {
  if (n_ < 1 || n_ > 32) throw std::invalid_argument("scorer supports 1..32 nodes");
  if (rows_ < n_ + 1) throw std::invalid_argument("log-likelihood needs at least n+1 rows");
  if (!data.x.allFinite()) throw std::invalid_argument("dataset has non-finite entries");
  mean_ = data.x.colwise().mean();
  Eigen::MatrixXd c = data.x.rowwise() - mean_.transpose();
  scatter_ = c.transpose() * c;
}

double LinearGaussianScorer::local_score(int node, std::uint32_t parent_mask) const {
  if (node < 0 || node >= n_) throw std::out_of_range("node out of range");
  if (parent_mask >> node & 1u) throw std::invalid_argument("node cannot be its own parent");
  const std::uint64_t key = (static_cast<std::uint64_t>(node) << 32) | parent_mask;
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;

  std::vector<int> pa;
  for (int i = 0; i < n_; ++i)
    if (parent_mask >> i & 1u) pa.push_back(i);
  double rss = scatter_(node, node);
  if (!pa.empty()) {
    const int k = static_cast<int>(pa.size());
    Eigen::MatrixXd spp(k, k);
    Eigen::VectorXd spj(k);
    for (int a = 0; a < k; ++a) {
      spj(a) = scatter_(pa[a], node);
      for (int b = 0; b < k; ++b) spp(a, b) = scatter_(pa[a], pa[b]);
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(spp);
    qr.setThreshold(1e-10);
    Eigen::VectorXd beta;
    if (qr.rank() < k) {
      ++ridge_fallbacks_;
      spp.diagonal().array() += kRidgeJitter;
      beta = spp.ldlt().solve(spj);
    } else {
      beta = qr.solve(spj);
    }
    // Residual sum of squares of the ridge/OLS fit.
    rss = scatter_(node, node) - 2.0 * beta.dot(spj) + beta.dot(spp * beta);
    if (qr.rank() < k) rss -= kRidgeJitter * beta.squaredNorm();
  }
  const double var = rss / static_cast<double>(rows_);
  const double scale = 1.0 + mean_(node) * mean_(node);
  if (!(var > 1e-14 * scale) || !std::isfinite(var))
    throw std::domain_error("zero residual variance for node " + std::to_string(node) +
                            " (degenerate data); log-likelihood is unbounded");
  const double ll = -0.5 * static_cast<double>(rows_) * (std::log(2.0 * std::numbers::pi * var) + 1.0);
  cache_.emplace(key, ll);
  return ll;
}

double LinearGaussianScorer::log_likelihood(const Adjacency& adj) const {
  if (static_cast<int>(adj.size()) != n_) throw std::invalid_argument("graph and data disagree on node count");
  double s = 0.0;
  for (int j = 0; j < n_; ++j) {
    std::uint32_t m = 0;
    for (int i = 0; i < n_; ++i)
      if (adj[i][j]) m |= 1u << i;
    s += local_score(j, m);
  }
  return s;
}

double LinearGaussianScorer::log_likelihood(const Dag& dag) const { return log_likelihood(dag.adjacency()); }

double log_likelihood(const Dag& dag, const Dataset& data) { return LinearGaussianScorer(data).log_likelihood(dag); }

// ---------------------------------------------------------------------------
// Files

void write_dataset_csv(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (int j = 0; j < d.n(); ++j)
    os << (j ? "," : "") << (j < static_cast<int>(d.names.size()) ? d.names[j] : "x" + std::to_string(j));
  os << '\n';
  os.precision(17);
  for (Eigen::Index r = 0; r < d.rows(); ++r) {
    for (int j = 0; j < d.n(); ++j) os << (j ? "," : "") << d.x(r, j);
    os << '\n';
  }
}

Dataset read_dataset_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  Dataset d;
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("empty dataset file " + path.string());
  {
    std::stringstream ss(line);
    std::string name;
    while (std::getline(ss, name, ',')) d.names.push_back(name);
  }
  std::vector<double> values;
  Eigen::Index rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(std::stod(cell));
      ++cols;
    }
    if (cols != d.names.size())
      throw std::invalid_argument("row " + std::to_string(rows + 1) + " has " + std::to_string(cols) + " columns");
    ++rows;
  }
  const int n = static_cast<int>(d.names.size());
  d.x.resize(rows, n);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (int j = 0; j < n; ++j) d.x(r, j) = values[r * n + j];
  return d;
}

std::string to_edge_list(const Dag& dag) {
  std::ostringstream os;
  os << "# nodes " << dag.n() << '\n';
  for (auto [i, j] : dag.edges()) os << i << " -> " << j << '\n';
  return os.str();
}

Dag parse_edge_list(const std::string& text, std::optional<int> n) {
  std::istringstream is(text);
  std::string line;
  std::vector<std::pair<int, int>> edges;
  int max_id = -1;
  while (std::getline(is, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (line[line.find_first_not_of(" \t")] == '#') {
      std::istringstream hs(line.substr(line.find('#') + 1));
      std::string word;
      int count = 0;
      if (hs >> word >> count && word == "nodes" && !n) n = count;
      continue;
    }
    std::istringstream ls(line);
    int i = 0, j = 0;
    std::string arrow;
    if (!(ls >> i >> arrow >> j) || arrow != "->") throw std::invalid_argument("bad edge line '" + line + "'");
    edges.emplace_back(i, j);
    max_id = std::max({max_id, i, j});
  }
  const int nodes = n.value_or(max_id + 1);
  if (max_id >= nodes) throw std::invalid_argument("edge endpoint exceeds node count");
  Adjacency adj(nodes, std::vector<std::uint8_t>(nodes, 0));
  for (auto [i, j] : edges) {
    if (i < 0 || j < 0) throw std::invalid_argument("negative node id");
    adj[i][j] = 1;
  }
  return Dag(std::move(adj));
}

void write_edge_list(const Dag& dag, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << to_edge_list(dag);
}

Dag read_edge_list(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_edge_list(ss.str());
}

}  // namespace nesy::world
