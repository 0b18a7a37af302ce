#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bandvq/engine/tensor.hpp"
#include "bandvq/rng.hpp"

namespace bandvq::testutil {

inline std::vector<double> random_values(std::size_t n, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = scale * normal(rng);
  return v;
}

inline engine::Tensor<double> random_tensor(engine::Shape shape, std::uint64_t seed, double scale = 1.0,
                                            bool requires_grad = true) {
  const std::size_t n = engine::numel_of(shape);
  return engine::Tensor<double>(std::move(shape), random_values(n, seed, scale), requires_grad);
}

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // "param[index]"
  std::size_t checked = 0;
};

// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries whose
// true gradient is ~0 from dividing roundoff by roundoff.
inline constexpr double kRelFloor = 1e-3;

/// Central finite differences over every element of every parameter.
inline GradCheck grad_check(engine::ParamList<double>& params, const std::function<engine::Tensor<double>()>& loss,
                            double h = 1e-5) {
  engine::zero_grads(params);
  auto l = loss();
  l.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    auto g = p.tensor.grad();
    analytic.emplace_back(g.begin(), g.end());
  }
  GradCheck out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto v = params[i].tensor.mutable_data();
    for (std::size_t j = 0; j < v.size(); ++j) {
      const double orig = v[j];
      v[j] = orig + h;
      const double lp = loss().item();
      v[j] = orig - h;
      const double lm = loss().item();
      v[j] = orig;
      const double num = (lp - lm) / (2.0 * h);
      const double a = analytic[i][j];
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), kRelFloor});
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = params[i].name + "[" + std::to_string(j) + "] analytic " + std::to_string(a) + " numeric " +
                    std::to_string(num);
      }
    }
  }
  return out;
}

/// A scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    Rng rng(std::hash<std::string>{}(tag) ^
            static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count()));
    path_ = std::filesystem::temp_directory_path() / ("bandvq_" + tag + "_" + std::to_string(rng() % 1000000007));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace bandvq::testutil
