#ifndef LCD_TEST_UTIL_HPP
#define LCD_TEST_UTIL_HPP

#include <gtest/gtest.h>

#include <filesystem>
#include <random>
#include <string>

#include "lcd/geom.hpp"

namespace lcd::test {

inline Pose random_pose(std::mt19937_64& rng, double max_translation = 10.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> angle(-kPi, kPi);
  const Vec3 axis(u(rng), u(rng), u(rng));
  const Vec3 t(u(rng) * max_translation, u(rng) * max_translation, u(rng) * max_translation);
  return Pose::from_axis_angle(axis.norm() > 1e-3 ? axis : Vec3::UnitZ(), angle(rng), t);
}

inline PointCloud random_cloud(std::mt19937_64& rng, std::size_t n, double extent = 10.0) {
  std::uniform_real_distribution<double> u(-extent, extent), i(0.0, 1.0);
  PointCloud c;
  for (std::size_t k = 0; k < n; ++k) c.points.emplace_back(u(rng), u(rng), u(rng), i(rng));
  return c;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "lcd_test";
    if (info) name += std::string("_") + info->test_suite_name() + "_" + info->name();
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline double max_coordinate_diff(const PointCloud& a, const PointCloud& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, (a[i].position - b[i].position).cwiseAbs().maxCoeff());
  }
  return m;
}

}  // namespace lcd::test

#endif  // LCD_TEST_UTIL_HPP
