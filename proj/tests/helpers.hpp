#pragma once

#include "sdsgan/io.hpp"
#include "sdsgan/scene.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

namespace testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("sdsgan_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& p) const { return path_ / p; }

 private:
  fs::path path_;
};

/// Directory holding the cached world and prior, or empty when the fixtures were not built.
inline fs::path fixtures_dir() {
  const char* env = std::getenv("SDSGAN_FIXTURES");
  return env ? fs::path(env) : fs::path();
}

/// Random field with moderate densities so renders are partially transparent.
template <typename Scalar>
sdsgan::RadianceField<Scalar> random_field(int n, std::uint64_t seed, double density_offset = -1.0, double spread = 1.0) {
  sdsgan::RadianceField<Scalar> f(n, {Eigen::Matrix<Scalar, 3, 1>::Constant(-1), Eigen::Matrix<Scalar, 3, 1>::Constant(1)});
  sdsgan::Rng rng(seed);
  for (sdsgan::Index i = 0; i < f.nodes(); ++i) f.params[i] = Scalar(density_offset + spread * rng.normal());
  for (sdsgan::Index i = f.nodes(); i < f.parameter_count(); ++i) f.params[i] = Scalar(rng.normal());
  return f;
}

/// Norm-wise relative error |a - b| / |b|.
template <typename A, typename B>
double relative_error(const A& a, const B& b) {
  return (a.template cast<double>() - b.template cast<double>()).norm() / std::max(1e-300, b.template cast<double>().norm());
}

/// Central differences of a scalar function of a parameter vector.
template <typename Vec, typename F>
Eigen::VectorXd central_differences(Vec params, F&& f, double h, const std::vector<sdsgan::Index>& which = {}) {
  const sdsgan::Index n = params.size();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  auto one = [&](sdsgan::Index i) {
    const auto keep = params[i];
    params[i] = keep + h;
    const double up = f(params);
    params[i] = keep - h;
    const double down = f(params);
    params[i] = keep;
    out[i] = (up - down) / (2.0 * h);
  };
  if (which.empty())
    for (sdsgan::Index i = 0; i < n; ++i) one(i);
  else
    for (auto i : which) one(i);
  return out;
}

}  // namespace testing
