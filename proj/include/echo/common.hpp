#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace echo {

// Exit-code families used by the command-line harness.
enum class ErrorKind { validation = 2, io = 3, numeric = 4, usage = 5 };

class EchoError : public std::runtime_error {
 public:
  EchoError(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct ValidationError : EchoError {
  explicit ValidationError(const std::string& what)
      : EchoError(ErrorKind::validation, what) {}
};

struct IoError : EchoError {
  explicit IoError(const std::string& what) : EchoError(ErrorKind::io, what) {}
};

struct NumericError : EchoError {
  explicit NumericError(const std::string& what)
      : EchoError(ErrorKind::numeric, what) {}
};

// splitmix64 finalizer; used to derive independent stream seeds from
// (base seed, index) pairs so results never depend on execution order.
constexpr std::uint64_t mix_seed(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) noexcept {
  return mix_seed(mix_seed(base) ^ (index * 0xd1b54a32d192ed03ULL + 1));
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a,
                                    std::uint64_t b) noexcept {
  return derive_seed(derive_seed(base, a), b);
}

}  // namespace echo
