#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "civkit/dataset.hpp"
#include "civkit/rng.hpp"

using namespace civkit;

namespace {

Dataset tiny() {
  Eigen::VectorXd y(3), z(3), a(3), c(3);
  y << 1, 2, 3;
  z << 0.5, -1, 2;
  a << 1.5, 0, -2;
  c << 1, 1, 0;
  return Dataset({"Y", "Z", "A", "C"}, {y, z, a, c});
}

}  // namespace

TEST_CASE("csv parses a small file") {
  std::istringstream in("Y,Z,A,C\n1,0.5,1.5,1\n2,-1,0,1\n3,2,-2,0\n");
  const auto load = read_csv(in);
  REQUIRE(load.data.n_rows() == 3);
  REQUIRE(load.data.n_cols() == 4);
  REQUIRE(load.data.column("Z")[2] == 2.0);
  REQUIRE(load.rows_dropped == 0);
}

TEST_CASE("csv missing declared column is a schema error naming it") {
  std::istringstream in("Y,Z,A\n1,2,3\n");
  const auto load = read_csv(in);
  RoleMap roles{"Y", {"A"}, {"C"}, "Z", std::nullopt};
  try {
    roles.validate(load.data);
    FAIL("expected schema_error");
  } catch (const schema_error& e) {
    REQUIRE(std::string(e.what()).find("C") != std::string::npos);
  }
}

TEST_CASE("csv empty cell honours na_policy") {
  const std::string text = "Y,Z\n1,2\n,3\n4,5\n";
  {
    std::istringstream in(text);
    REQUIRE_THROWS_AS(read_csv(in), parse_error);
  }
  {
    std::istringstream in(text);
    CsvOptions opt;
    opt.na_policy = NaPolicy::drop;
    const auto load = read_csv(in, opt);
    REQUIRE(load.data.n_rows() == 2);
    REQUIRE(load.rows_dropped == 1);
    REQUIRE_FALSE(load.warnings.empty());
  }
}

TEST_CASE("csv junk cell is always a parse error") {
  std::istringstream in("Y,Z\n1,abc\n");
  CsvOptions opt;
  opt.na_policy = NaPolicy::drop;
  REQUIRE_THROWS_AS(read_csv(in, opt), parse_error);
}

TEST_CASE("csv quoted fields and CRLF") {
  std::istringstream in("\"a,b\",c\r\n1,2\r\n");
  const auto load = read_csv(in);
  REQUIRE(load.data.names()[0] == "a,b");
  REQUIRE(load.data.column("c")[0] == 2.0);
}

TEST_CASE("csv round trip is bit exact for doubles") {
  auto rng = make_rng(42);
  std::normal_distribution<double> gauss;
  Eigen::VectorXd a(64), b(64);
  for (int i = 0; i < 64; ++i) {
    a[i] = gauss(rng) * std::pow(10.0, (i % 17) - 8);
    b[i] = gauss(rng);
  }
  const Dataset ds({"a", "b"}, {a, b});
  std::ostringstream out;
  write_csv(ds, out);
  std::istringstream in(out.str());
  const auto load = read_csv(in);
  for (int i = 0; i < 64; ++i) {
    REQUIRE(load.data.column("a")[i] == a[i]);
    REQUIRE(load.data.column("b")[i] == b[i]);
  }
}

TEST_CASE("duplicate column names rejected") {
  Eigen::VectorXd v(2);
  v << 1, 2;
  REQUIRE_THROWS_AS(Dataset({"x", "x"}, {v, v}), schema_error);
}

TEST_CASE("transform center") {
  Eigen::VectorXd v(3);
  v << 1, 2, 3;
  const Dataset ds({"x"}, {v});
  const auto out = transform_column(ds, "x", TransformKind::center);
  REQUIRE(out.column("x")[0] == Catch::Approx(-1.0));
  REQUIRE(out.column("x")[1] == Catch::Approx(0.0));
  REQUIRE(out.column("x")[2] == Catch::Approx(1.0));
}

TEST_CASE("transform log on exact powers of e") {
  Eigen::VectorXd v(3);
  v << 1.0, std::exp(1.0), std::exp(2.0);
  const Dataset ds({"x"}, {v});
  const auto out = transform_column(ds, "x", TransformKind::log);
  REQUIRE(out.column("x")[0] == Catch::Approx(0.0).margin(1e-15));
  REQUIRE(out.column("x")[1] == Catch::Approx(1.0));
  REQUIRE(out.column("x")[2] == Catch::Approx(2.0));
}

TEST_CASE("transform log_center composes log then centering") {
  Eigen::VectorXd v(3);
  v << 1.0, std::exp(1.0), std::exp(2.0);
  const Dataset ds({"x"}, {v});
  const auto out = transform_column(ds, "x", TransformKind::log_center);
  REQUIRE(out.column("x")[0] == Catch::Approx(-1.0));
  REQUIRE(out.column("x")[1] == Catch::Approx(0.0).margin(1e-15));
  REQUIRE(out.column("x")[2] == Catch::Approx(1.0));
}

TEST_CASE("infinite cells follow the na_policy") {
  const std::string text = "Y,Z\n1,2\ninf,3\n4,5\n";
  {
    std::istringstream in(text);
    REQUIRE_THROWS_AS(read_csv(in), parse_error);
  }
  {
    std::istringstream in(text);
    CsvOptions opt;
    opt.na_policy = NaPolicy::drop;
    const auto load = read_csv(in, opt);
    REQUIRE(load.data.n_rows() == 2);
    REQUIRE(load.rows_dropped == 1);
  }
}

TEST_CASE("transform log rejects non-positive values with the row index") {
  Eigen::VectorXd v(2);
  v << 0.0, 1.0;
  const Dataset ds({"x"}, {v});
  try {
    transform_column(ds, "x", TransformKind::log);
    FAIL("expected domain_error");
  } catch (const domain_error& e) {
    REQUIRE(std::string(e.what()).find("row 0") != std::string::npos);
  }
}

TEST_CASE("centered column has numerically zero mean") {
  auto rng = make_rng(7);
  std::normal_distribution<double> gauss(100.0, 55.0);
  Eigen::VectorXd v(2000);
  for (int i = 0; i < 2000; ++i) v[i] = gauss(rng);
  const Dataset ds({"x"}, {v});
  const auto out = transform_column(ds, "x", TransformKind::center);
  const double scale = out.column("x").cwiseAbs().maxCoeff();
  REQUIRE(std::abs(out.column("x").mean()) <= 1e-12 * std::max(1.0, scale));
}

TEST_CASE("role map rejects overlapping roles") {
  const auto ds = tiny();
  RoleMap roles{"Y", {"A"}, {"A"}, "Z", std::nullopt};
  REQUIRE_THROWS_AS(roles.validate(ds), schema_error);
}

TEST_CASE("select_rows resamples with repetition") {
  const auto ds = tiny();
  const auto out = ds.select_rows({2, 2, 0});
  REQUIRE(out.n_rows() == 3);
  REQUIRE(out.column("Y")[0] == 3.0);
  REQUIRE(out.column("Y")[1] == 3.0);
  REQUIRE(out.column("Y")[2] == 1.0);
}
