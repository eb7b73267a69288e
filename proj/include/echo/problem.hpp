#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "echo/common.hpp"
#include "json.hpp"

namespace echo {

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

struct Customer {
  double x = 0.0;
  double y = 0.0;
  int demand = 0;
  friend bool operator==(const Customer&, const Customer&) = default;
};

struct Vehicle {
  int capacity = 0;
  double speed = 1.0;
  friend bool operator==(const Vehicle&, const Vehicle&) = default;
};

enum class Distribution { uniform, clustered };

std::string to_string(Distribution d);
Distribution distribution_from_string(const std::string& s);

// A min-max heterogeneous CVRP instance. Node 0 is the depot, node j >= 1 is
// customers[j - 1]. Vehicles are indexed from 0.
struct Instance {
  std::string id;
  Distribution distribution = Distribution::uniform;
  Point depot;
  std::vector<Customer> customers;
  std::vector<Vehicle> vehicles;

  std::size_t n_customers() const { return customers.size(); }
  std::size_t n_vehicles() const { return vehicles.size(); }
  std::size_t n_nodes() const { return customers.size() + 1; }
  Point node(std::size_t j) const {
    return j == 0 ? depot : Point{customers[j - 1].x, customers[j - 1].y};
  }
  int demand(std::size_t j) const { return j == 0 ? 0 : customers[j - 1].demand; }
  int max_capacity() const;
  long total_demand() const;

  friend bool operator==(const Instance&, const Instance&) = default;
};

// Throws ValidationError describing the first violated invariant.
void validate(const Instance& instance);

class DistanceMatrix {
 public:
  DistanceMatrix() = default;
  explicit DistanceMatrix(const Instance& instance);

  std::size_t size() const { return n_; }
  double operator()(std::size_t a, std::size_t b) const { return d_[a * n_ + b]; }
  const std::vector<double>& data() const { return d_; }

 private:
  std::size_t n_ = 0;
  std::vector<double> d_;
};

inline DistanceMatrix distance_matrix(const Instance& instance) {
  return DistanceMatrix(instance);
}

struct IntRange {
  int lo = 0;
  int hi = 0;
};

struct GenConfig {
  int n_customers = 60;
  int n_vehicles = 3;
  IntRange demand_range{1, 9};
  IntRange capacity_range{20, 40};
  double speed_lo = 0.5;
  double speed_hi = 1.0;
  Distribution distribution = Distribution::uniform;
  int cluster_count = 3;
  double cluster_noise_sigma = 0.05;
  std::uint64_t seed = 0;
  // Permits capacity ranges that cannot serve every possible demand.
  bool allow_unsolvable = false;
};

void validate(const GenConfig& config);

Instance generate_instance(const GenConfig& config);

inline constexpr int kInstanceFormatVersion = 1;

nlohmann::json instance_to_json(const Instance& instance);
Instance instance_from_json(const nlohmann::json& j);

void write_instance(const Instance& instance, const std::filesystem::path& path);
Instance read_instance(const std::filesystem::path& path);

// Serializes with 17 significant digits so doubles round-trip exactly.
std::string dump_json(const nlohmann::json& j);
nlohmann::json load_json_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace echo
