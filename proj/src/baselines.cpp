#include "echo/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "echo/common.hpp"

namespace echo {

void validate(const SearchBudget& b) {
  if (b.max_iterations < 0) throw ValidationError("max_iterations must be >= 0");
  if (!(b.max_seconds >= 0.0)) throw ValidationError("max_seconds must be >= 0");
  if (b.max_iterations == std::numeric_limits<long>::max() && std::isinf(b.max_seconds))
    throw ValidationError("search budget needs a finite iteration or time limit");
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double route_time(const Instance& inst, const DistanceMatrix& dist, const Route& r, std::size_t v) {
  double len = 0.0;
  std::size_t prev = 0;
  for (int node : r) {
    len += dist(prev, static_cast<std::size_t>(node));
    prev = static_cast<std::size_t>(node);
  }
  len += dist(prev, 0);
  return len / inst.vehicles[v].speed;
}

double objective_of(const Instance& inst, const DistanceMatrix& dist, const std::vector<Route>& routes) {
  double m = 0.0;
  for (std::size_t v = 0; v < routes.size(); ++v) m = std::max(m, route_time(inst, dist, routes[v], v));
  return m;
}

class Deadline {
 public:
  explicit Deadline(double seconds) : seconds_(seconds), start_(std::chrono::steady_clock::now()) {}
  bool passed() const {
    if (std::isinf(seconds_)) return false;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count() >= seconds_;
  }

 private:
  double seconds_;
  std::chrono::steady_clock::time_point start_;
};

class ExactSearch {
 public:
  ExactSearch(const Instance& inst, const DistanceMatrix& dist)
      : inst_(inst), dist_(dist), m_(inst.n_vehicles()), n_(inst.n_nodes()), served_(n_, 0),
        routes_(m_), fastest_after_(m_ + 1, 0.0) {
    for (std::size_t v = m_; v-- > 0;)
      fastest_after_[v] = std::max(fastest_after_[v + 1], inst.vehicles[v].speed);
    remaining_ = static_cast<int>(n_) - 1;
  }

  void run(std::vector<Route> incumbent) {
    best_routes_ = std::move(incumbent);
    best_ = objective_of(inst_, dist_, best_routes_);
    dfs(0, 0, 0, 0.0, 0.0);
  }

  const std::vector<Route>& best_routes() const { return best_routes_; }
  long nodes() const { return nodes_; }

 private:
  // Lower bound on the final objective from the current partial assignment.
  double bound(std::size_t v, std::size_t pos, double length, double finished) const {
    const double speed = inst_.vehicles[v].speed;
    double lb = std::max(finished, (length + dist_(pos, 0)) / speed);
    const double later = v + 1 < m_ ? fastest_after_[v + 1] : 0.0;
    for (std::size_t c = 1; c < n_; ++c) {
      if (served_[c]) continue;
      double here = (length + dist_(pos, c) + dist_(c, 0)) / speed;
      if (later > 0.0) here = std::min(here, 2.0 * dist_(0, c) / later);
      lb = std::max(lb, here);
    }
    return lb;
  }

  void dfs(std::size_t v, std::size_t pos, int load, double length, double finished) {
    ++nodes_;
    const double speed = inst_.vehicles[v].speed;
    if (remaining_ == 0) {
      const double obj = std::max(finished, (length + dist_(pos, 0)) / speed);
      if (obj < best_) {
        best_ = obj;
        best_routes_ = routes_;
      }
      return;
    }
    if (bound(v, pos, length, finished) >= best_) return;

    const int cap = inst_.vehicles[v].capacity;
    std::vector<std::size_t> order;
    for (std::size_t c = 1; c < n_; ++c)
      if (!served_[c] && load + inst_.demand(c) <= cap) order.push_back(c);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dist_(pos, a) < dist_(pos, b); });
    for (std::size_t c : order) {
      served_[c] = 1;
      --remaining_;
      routes_[v].push_back(static_cast<int>(c));
      dfs(v, c, load + inst_.demand(c), length + dist_(pos, c), finished);
      routes_[v].pop_back();
      ++remaining_;
      served_[c] = 0;
    }
    if (pos != 0) {
      routes_[v].push_back(0);
      dfs(v, 0, 0, length + dist_(pos, 0), finished);
      routes_[v].pop_back();
    }
    // A route never ends on a reload: that tour is dominated by stopping first.
    if (v + 1 < m_ && (pos != 0 || routes_[v].empty()))
      dfs(v + 1, 0, 0, 0.0, std::max(finished, (length + dist_(pos, 0)) / speed));
  }

  const Instance& inst_;
  const DistanceMatrix& dist_;
  std::size_t m_, n_;
  std::vector<char> served_;
  std::vector<Route> routes_, best_routes_;
  std::vector<double> fastest_after_;
  int remaining_ = 0;
  double best_ = kInf;
  long nodes_ = 0;
};

}  // namespace

ExactResult exact_small(const Instance& instance) {
  validate(instance);
  if (instance.n_customers() > kExactMaxCustomers || instance.n_vehicles() > kExactMaxVehicles)
    throw ValidationError("exact_small handles at most 8 customers and 3 vehicles, got N=" +
                          std::to_string(instance.n_customers()) +
                          " M=" + std::to_string(instance.n_vehicles()));
  const DistanceMatrix dist(instance);
  ExactSearch search(instance, dist);
  search.run(greedy_construction(instance, dist));
  ExactResult r;
  r.solution = make_solution(instance, dist, search.best_routes());
  r.objective = r.solution.objective;
  r.nodes_explored = search.nodes();
  return r;
}

std::vector<Route> greedy_construction(const Instance& inst, const DistanceMatrix& dist) {
  const std::size_t m = inst.n_vehicles(), n = inst.n_nodes();
  std::vector<Route> routes(m);
  std::vector<std::size_t> pos(m, 0);
  std::vector<double> clock(m, 0.0);
  std::vector<int> load(m, 0);
  std::vector<char> served(n, 0);
  served[0] = 1;
  std::size_t remaining = n - 1;
  while (remaining > 0) {
    int smallest = std::numeric_limits<int>::max();
    for (std::size_t c = 1; c < n; ++c)
      if (!served[c]) smallest = std::min(smallest, inst.demand(c));
    std::size_t v = m;
    for (std::size_t i = 0; i < m; ++i)
      if (inst.vehicles[i].capacity >= smallest && (v == m || clock[i] < clock[v])) v = i;
    if (v == m) throw ValidationError("no vehicle can carry a remaining customer");

    std::size_t next = 0;
    double best = kInf;
    for (std::size_t c = 1; c < n; ++c)
      if (!served[c] && load[v] + inst.demand(c) <= inst.vehicles[v].capacity && dist(pos[v], c) < best) {
        best = dist(pos[v], c);
        next = c;
      }
    if (next == 0) {
      load[v] = 0;
    } else {
      served[next] = 1;
      --remaining;
      load[v] += inst.demand(next);
    }
    clock[v] += dist(pos[v], next) / inst.vehicles[v].speed;
    pos[v] = next;
    routes[v].push_back(static_cast<int>(next));
  }
  return routes;
}

bool normalize_and_repair(const Instance& inst, std::vector<Route>& routes) {
  for (std::size_t v = 0; v < routes.size(); ++v) {
    const int cap = inst.vehicles[v].capacity;
    Route out;
    int load = 0;
    for (int node : routes[v]) {
      if (node == 0) {
        if (!out.empty() && out.back() != 0) out.push_back(0);
        load = 0;
        continue;
      }
      const int d = inst.demand(static_cast<std::size_t>(node));
      if (d > cap) return false;
      if (load + d > cap) {
        out.push_back(0);
        load = 0;
      }
      out.push_back(node);
      load += d;
    }
    while (!out.empty() && out.back() == 0) out.pop_back();
    routes[v] = std::move(out);
  }
  return true;
}

namespace {

struct Position {
  std::size_t route, index;
};

std::vector<Position> customer_positions(const std::vector<Route>& routes) {
  std::vector<Position> out;
  for (std::size_t r = 0; r < routes.size(); ++r)
    for (std::size_t i = 0; i < routes[r].size(); ++i)
      if (routes[r][i] != 0) out.push_back({r, i});
  return out;
}

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// Applies one random neighbourhood move; false if the move had no target.
bool random_move(std::vector<Route>& routes, std::mt19937_64& rng) {
  const auto cust = customer_positions(routes);
  if (cust.empty()) return false;
  switch (uniform_index(rng, 4)) {
    case 0: {  // relocate
      const Position p = cust[uniform_index(rng, cust.size())];
      const int node = routes[p.route][p.index];
      routes[p.route].erase(routes[p.route].begin() + static_cast<std::ptrdiff_t>(p.index));
      Route& dst = routes[uniform_index(rng, routes.size())];
      dst.insert(dst.begin() + static_cast<std::ptrdiff_t>(uniform_index(rng, dst.size() + 1)), node);
      return true;
    }
    case 1: {  // swap
      if (cust.size() < 2) return false;
      const Position a = cust[uniform_index(rng, cust.size())];
      const Position b = cust[uniform_index(rng, cust.size())];
      std::swap(routes[a.route][a.index], routes[b.route][b.index]);
      return true;
    }
    case 2: {  // 2-opt
      const Position p = cust[uniform_index(rng, cust.size())];
      Route& r = routes[p.route];
      if (r.size() < 2) return false;
      std::size_t i = uniform_index(rng, r.size()), j = uniform_index(rng, r.size());
      if (i > j) std::swap(i, j);
      if (i == j) return false;
      std::reverse(r.begin() + static_cast<std::ptrdiff_t>(i), r.begin() + static_cast<std::ptrdiff_t>(j) + 1);
      return true;
    }
    default: {  // shift a customer across an adjacent reload
      std::vector<Position> reloads;
      for (std::size_t r = 0; r < routes.size(); ++r)
        for (std::size_t i = 0; i < routes[r].size(); ++i)
          if (routes[r][i] == 0) reloads.push_back({r, i});
      if (reloads.empty()) return false;
      const Position z = reloads[uniform_index(rng, reloads.size())];
      Route& r = routes[z.route];
      const bool left = uniform_index(rng, 2) == 0;
      const std::size_t other = left ? z.index - 1 : z.index + 1;
      if ((left && z.index == 0) || other >= r.size()) return false;
      std::swap(r[z.index], r[other]);
      return true;
    }
  }
}

}  // namespace

Solution simulated_annealing(const Instance& instance, const SearchBudget& budget, SearchTrace* trace) {
  validate(instance);
  validate(budget);
  const DistanceMatrix dist(instance);
  std::mt19937_64 rng(budget.seed);
  std::vector<Route> cur = greedy_construction(instance, dist);
  normalize_and_repair(instance, cur);
  double cur_obj = objective_of(instance, dist, cur);
  std::vector<Route> best = cur;
  double best_obj = cur_obj;
  double temp = cur_obj / 10.0;
  if (trace) trace->assign(1, best_obj);
  const Deadline deadline(budget.max_seconds);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (long it = 0; it < budget.max_iterations; ++it) {
    if ((it & 255) == 0 && deadline.passed()) break;
    std::vector<Route> cand = cur;
    if (random_move(cand, rng) && normalize_and_repair(instance, cand)) {
      const double obj = objective_of(instance, dist, cand);
      const double delta = obj - cur_obj;
      if (delta <= 0.0 || (temp > 0.0 && unit(rng) < std::exp(-delta / temp))) {
        cur = std::move(cand);
        cur_obj = obj;
        if (obj < best_obj) {
          best_obj = obj;
          best = cur;
        }
      }
    }
    temp *= 0.995;
    if (trace) trace->push_back(best_obj);
  }
  return make_solution(instance, dist, std::move(best));
}

double split_giant_tour(const Instance& inst, const DistanceMatrix& dist, const std::vector<int>& tour,
                        std::vector<Route>* routes) {
  const std::size_t m = inst.n_vehicles(), n = tour.size();
  auto node = [&](std::size_t i) { return static_cast<std::size_t>(tour[i]); };
  // block[v][a][b]: duration of vehicle v serving tour[a, b) with optimal reloads.
  std::vector<double> block(m * (n + 1) * (n + 1), kInf);
  std::vector<std::size_t> cut(m * (n + 1) * (n + 1), 0);
  auto at = [&](std::size_t v, std::size_t a, std::size_t b) { return (v * (n + 1) + a) * (n + 1) + b; };
  std::vector<double> g(n + 1);
  for (std::size_t v = 0; v < m; ++v) {
    const int cap = inst.vehicles[v].capacity;
    for (std::size_t a = 0; a <= n; ++a) {
      std::fill(g.begin(), g.end(), kInf);
      g[a] = 0.0;
      block[at(v, a, a)] = 0.0;
      for (std::size_t b = a + 1; b <= n; ++b) {
        // last trip covers tour[i, b)
        int load = 0;
        double path = 0.0;
        for (std::size_t i = b; i-- > a;) {
          load += inst.demand(node(i));
          if (load > cap) break;
          if (i + 1 < b) path += dist(node(i), node(i + 1));
          if (!std::isfinite(g[i])) continue;
          const double trip = dist(0, node(i)) + path + dist(node(b - 1), 0);
          if (g[i] + trip < g[b]) {
            g[b] = g[i] + trip;
            cut[at(v, a, b)] = i;
          }
        }
        block[at(v, a, b)] = g[b] / inst.vehicles[v].speed;
      }
    }
  }
  // f[v][j]: best max duration with vehicles 0..v covering tour[0, j).
  std::vector<double> f((m + 1) * (n + 1), kInf);
  std::vector<std::size_t> from((m + 1) * (n + 1), 0);
  f[0] = 0.0;
  for (std::size_t v = 0; v < m; ++v)
    for (std::size_t j = 0; j <= n; ++j)
      for (std::size_t i = 0; i <= j; ++i) {
        const double c = std::max(f[v * (n + 1) + i], block[at(v, i, j)]);
        if (c < f[(v + 1) * (n + 1) + j]) {
          f[(v + 1) * (n + 1) + j] = c;
          from[(v + 1) * (n + 1) + j] = i;
        }
      }
  const double best = f[m * (n + 1) + n];
  if (routes && std::isfinite(best)) {
    routes->assign(m, {});
    std::size_t j = n;
    for (std::size_t v = m; v-- > 0;) {
      const std::size_t a = from[(v + 1) * (n + 1) + j];
      std::vector<std::pair<std::size_t, std::size_t>> trips;
      for (std::size_t b = j; b > a;) {
        const std::size_t i = cut[at(v, a, b)];
        trips.emplace_back(i, b);
        b = i;
      }
      Route& r = (*routes)[v];
      for (auto t = trips.rbegin(); t != trips.rend(); ++t) {
        if (!r.empty()) r.push_back(0);
        for (std::size_t k = t->first; k < t->second; ++k) r.push_back(tour[k]);
      }
      j = a;
    }
  }
  return best;
}

namespace {

std::vector<int> order_crossover(const std::vector<int>& p1, const std::vector<int>& p2,
                                 std::mt19937_64& rng) {
  const std::size_t n = p1.size();
  if (n < 2) return p1;
  std::size_t i = uniform_index(rng, n), j = uniform_index(rng, n);
  if (i > j) std::swap(i, j);
  std::vector<int> child(n, -1);
  std::vector<char> used(n + 1, 0);
  for (std::size_t k = i; k <= j; ++k) {
    child[k] = p1[k];
    used[static_cast<std::size_t>(p1[k])] = 1;
  }
  std::size_t w = (j + 1) % n;
  for (std::size_t s = 0; s < n; ++s) {
    const int gene = p2[(j + 1 + s) % n];
    if (used[static_cast<std::size_t>(gene)]) continue;
    child[w] = gene;
    w = (w + 1) % n;
  }
  return child;
}

}  // namespace

Solution genetic(const Instance& instance, const SearchBudget& budget, const GeneticConfig& config,
                 SearchTrace* trace) {
  validate(instance);
  validate(budget);
  if (config.population < 4) throw ValidationError("genetic search needs a population >= 4");
  if (config.elite < 0 || config.elite > config.population)
    throw ValidationError("elite count must be within the population");
  const DistanceMatrix dist(instance);
  const auto pop_size = static_cast<std::size_t>(config.population);
  std::mt19937_64 rng(budget.seed);

  std::vector<std::vector<int>> pop;
  for (const auto& t : config.initial) {
    if (pop.size() == pop_size) break;
    std::vector<int> sorted = t;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t k = 0; k < sorted.size(); ++k)
      if (sorted.size() != instance.n_customers() || sorted[k] != static_cast<int>(k + 1))
        throw ValidationError("initial giant tour is not a customer permutation");
    pop.push_back(t);
  }
  if (pop.size() < pop_size) {
    std::vector<int> seeded;
    for (const Route& r : greedy_construction(instance, dist))
      for (int c : r)
        if (c != 0) seeded.push_back(c);
    if (config.initial.empty()) pop.push_back(seeded);
    while (pop.size() < pop_size) {
      std::shuffle(seeded.begin(), seeded.end(), rng);
      pop.push_back(seeded);
    }
  }

  std::vector<double> fit(pop_size);
  auto evaluate = [&] {
    for (std::size_t i = 0; i < pop_size; ++i) fit[i] = split_giant_tour(instance, dist, pop[i]);
  };
  evaluate();
  auto best_index = [&] {
    return static_cast<std::size_t>(std::min_element(fit.begin(), fit.end()) - fit.begin());
  };
  std::vector<int> best = pop[best_index()];
  double best_fit = fit[best_index()];
  if (!std::isfinite(best_fit)) throw ValidationError("no feasible split for the initial population");
  if (trace) trace->assign(1, best_fit);

  const Deadline deadline(budget.max_seconds);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto tournament = [&]() -> const std::vector<int>& {
    const std::size_t a = uniform_index(rng, pop_size), b = uniform_index(rng, pop_size);
    return fit[b] < fit[a] ? pop[b] : pop[a];
  };
  for (long gen = 0; gen < budget.max_iterations; ++gen) {
    if (deadline.passed()) break;
    std::vector<std::size_t> rank(pop_size);
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(), [&](std::size_t a, std::size_t b) { return fit[a] < fit[b]; });
    std::vector<std::vector<int>> next;
    for (int e = 0; e < config.elite; ++e) next.push_back(pop[rank[static_cast<std::size_t>(e)]]);
    while (next.size() < pop_size) {
      const auto& p1 = tournament();
      const auto& p2 = tournament();
      std::vector<int> child = order_crossover(p1, p2, rng);
      if (child.size() >= 2 && unit(rng) < config.mutation_rate)
        std::swap(child[uniform_index(rng, child.size())], child[uniform_index(rng, child.size())]);
      next.push_back(std::move(child));
    }
    pop = std::move(next);
    evaluate();
    const std::size_t bi = best_index();
    if (fit[bi] < best_fit) {
      best_fit = fit[bi];
      best = pop[bi];
    }
    if (trace) trace->push_back(best_fit);
  }
  std::vector<Route> routes;
  split_giant_tour(instance, dist, best, &routes);
  return make_solution(instance, dist, std::move(routes));
}

}  // namespace echo
