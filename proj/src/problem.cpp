#include "echo/problem.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "echo/common.hpp"

namespace echo {

std::string to_string(Distribution d) {
  return d == Distribution::uniform ? "uniform" : "clustered";
}

Distribution distribution_from_string(const std::string& s) {
  if (s == "uniform") return Distribution::uniform;
  if (s == "clustered") return Distribution::clustered;
  throw ValidationError("unknown distribution '" + s + "'");
}

int Instance::max_capacity() const {
  int best = 0;
  for (const auto& v : vehicles) best = std::max(best, v.capacity);
  return best;
}

long Instance::total_demand() const {
  long total = 0;
  for (const auto& c : customers) total += c.demand;
  return total;
}

void validate(const Instance& instance) {
  if (instance.customers.empty()) throw ValidationError("instance has no customers");
  if (instance.vehicles.empty()) throw ValidationError("instance has no vehicles");
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(instance.depot.x) || !finite(instance.depot.y))
    throw ValidationError("depot coordinates are not finite");
  for (std::size_t i = 0; i < instance.vehicles.size(); ++i) {
    const auto& v = instance.vehicles[i];
    if (v.capacity <= 0)
      throw ValidationError("vehicle " + std::to_string(i) + " has non-positive capacity");
    if (!(v.speed > 0.0) || !finite(v.speed))
      throw ValidationError("vehicle " + std::to_string(i) + " has non-positive speed");
  }
  const int cap = instance.max_capacity();
  for (std::size_t j = 0; j < instance.customers.size(); ++j) {
    const auto& c = instance.customers[j];
    const std::string name = "customer " + std::to_string(j + 1);
    if (!finite(c.x) || !finite(c.y)) throw ValidationError(name + " has non-finite coordinates");
    if (c.demand <= 0) throw ValidationError(name + " has non-positive demand");
    if (c.demand > cap) throw ValidationError(name + " demand exceeds every vehicle capacity");
  }
}

DistanceMatrix::DistanceMatrix(const Instance& instance)
    : n_(instance.n_nodes()), d_(n_ * n_, 0.0) {
  for (std::size_t a = 0; a < n_; ++a) {
    const Point pa = instance.node(a);
    for (std::size_t b = a + 1; b < n_; ++b) {
      const Point pb = instance.node(b);
      const double d = std::hypot(pa.x - pb.x, pa.y - pb.y);
      d_[a * n_ + b] = d;
      d_[b * n_ + a] = d;
    }
  }
}

void validate(const GenConfig& config) {
  if (config.n_customers < 1) throw ValidationError("n_customers must be >= 1");
  if (config.n_vehicles < 1) throw ValidationError("n_vehicles must be >= 1");
  if (config.demand_range.lo < 1 || config.demand_range.hi < config.demand_range.lo)
    throw ValidationError("demand range is empty or non-positive");
  if (config.capacity_range.lo < 1 || config.capacity_range.hi < config.capacity_range.lo)
    throw ValidationError("capacity range is empty or non-positive");
  if (!(config.speed_lo > 0.0) || config.speed_hi < config.speed_lo)
    throw ValidationError("speed interval is empty or non-positive");
  if (config.distribution == Distribution::clustered) {
    if (config.cluster_count < 1) throw ValidationError("cluster_count must be >= 1");
    if (!(config.cluster_noise_sigma > 0.0))
      throw ValidationError("cluster_noise_sigma must be > 0");
  }
  if (!config.allow_unsolvable && config.capacity_range.lo < config.demand_range.hi)
    throw ValidationError(
        "min capacity is below max demand; set allow_unsolvable to override");
}

Instance generate_instance(const GenConfig& config) {
  validate(config);
  std::mt19937_64 rng(config.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> demand(config.demand_range.lo, config.demand_range.hi);
  std::uniform_int_distribution<int> capacity(config.capacity_range.lo,
                                              config.capacity_range.hi);
  std::uniform_real_distribution<double> speed(config.speed_lo, config.speed_hi);

  Instance inst;
  inst.distribution = config.distribution;
  std::ostringstream id;
  id << (config.distribution == Distribution::uniform ? "u" : "c") << "-m" << config.n_vehicles
     << "-n" << config.n_customers << "-s" << config.seed;
  inst.id = id.str();

  inst.depot.x = unit(rng);
  inst.depot.y = unit(rng);
  inst.customers.resize(static_cast<std::size_t>(config.n_customers));

  if (config.distribution == Distribution::uniform) {
    for (auto& c : inst.customers) {
      c.x = unit(rng);
      c.y = unit(rng);
    }
  } else {
    std::vector<Point> centers(static_cast<std::size_t>(config.cluster_count));
    for (auto& p : centers) {
      p.x = unit(rng);
      p.y = unit(rng);
    }
    std::uniform_int_distribution<int> pick(0, config.cluster_count - 1);
    std::normal_distribution<double> noise(0.0, config.cluster_noise_sigma);
    for (auto& c : inst.customers) {
      const Point& p = centers[static_cast<std::size_t>(pick(rng))];
      c.x = std::clamp(p.x + noise(rng), 0.0, 1.0);
      c.y = std::clamp(p.y + noise(rng), 0.0, 1.0);
    }
  }
  for (auto& c : inst.customers) c.demand = demand(rng);

  inst.vehicles.resize(static_cast<std::size_t>(config.n_vehicles));
  for (auto& v : inst.vehicles) {
    v.capacity = capacity(rng);
    v.speed = speed(rng);
  }
  return inst;
}

nlohmann::json instance_to_json(const Instance& instance) {
  nlohmann::json j;
  j["format_version"] = kInstanceFormatVersion;
  j["id"] = instance.id;
  j["distribution"] = to_string(instance.distribution);
  j["depot"] = {instance.depot.x, instance.depot.y};
  auto& customers = j["customers"] = nlohmann::json::array();
  for (const auto& c : instance.customers)
    customers.push_back({{"x", c.x}, {"y", c.y}, {"demand", c.demand}});
  auto& vehicles = j["vehicles"] = nlohmann::json::array();
  for (const auto& v : instance.vehicles)
    vehicles.push_back({{"capacity", v.capacity}, {"speed", v.speed}});
  return j;
}

Instance instance_from_json(const nlohmann::json& j) {
  Instance inst;
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kInstanceFormatVersion)
      throw ValidationError("instance format version " + std::to_string(version) +
                            " is not supported");
    inst.id = j.at("id").get<std::string>();
    inst.distribution = distribution_from_string(j.at("distribution").get<std::string>());
    const auto& depot = j.at("depot");
    if (!depot.is_array() || depot.size() != 2) throw ValidationError("depot must be [x, y]");
    inst.depot = {depot[0].get<double>(), depot[1].get<double>()};
    for (const auto& c : j.at("customers"))
      inst.customers.push_back(
          {c.at("x").get<double>(), c.at("y").get<double>(), c.at("demand").get<int>()});
    for (const auto& v : j.at("vehicles"))
      inst.vehicles.push_back({v.at("capacity").get<int>(), v.at("speed").get<double>()});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed instance: ") + e.what());
  }
  validate(inst);
  return inst;
}

std::string dump_json(const nlohmann::json& j) { return j.dump(1, ' ') + "\n"; }

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

nlohmann::json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("malformed file '" + path.string() + "': " + e.what());
  }
}

void write_instance(const Instance& instance, const std::filesystem::path& path) {
  write_text_file(path, dump_json(instance_to_json(instance)));
}

Instance read_instance(const std::filesystem::path& path) {
  return instance_from_json(load_json_file(path));
}

}  // namespace echo
