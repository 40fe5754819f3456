#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "civkit/errors.hpp"
#include "civkit/gmm.hpp"

namespace civkit {

enum class BasisCross {
  none,
  leading_var,  // products of the first variable with each of the others
  all_pairs,
};

// Polynomial basis over a set of input variables: intercept, powers of each
// variable up to `degree`, plus the selected pairwise products. The default
// (degree 3, leading_var) is the nuisance-regression basis used throughout:
// cubic in Z and each covariate plus Z-by-covariate products.
class PolyBasis {
 public:
  PolyBasis() = default;

  PolyBasis(std::vector<std::string> var_names, int degree,
            BasisCross cross = BasisCross::leading_var)
      : var_names_(std::move(var_names)), degree_(degree), cross_(cross) {
    if (degree_ < 1) throw precondition_error("PolyBasis: degree must be >= 1");
    const int v = static_cast<int>(var_names_.size());
    terms_.push_back({});  // intercept
    for (int j = 0; j < v; ++j)
      for (int p = 1; p <= degree_; ++p) terms_.push_back({{j, p}});
    if (cross_ == BasisCross::leading_var) {
      for (int j = 1; j < v; ++j) terms_.push_back({{0, 1}, {j, 1}});
    } else if (cross_ == BasisCross::all_pairs) {
      for (int j = 0; j < v; ++j)
        for (int k = j + 1; k < v; ++k) terms_.push_back({{j, 1}, {k, 1}});
    }
  }

  int dim() const { return static_cast<int>(terms_.size()); }
  const std::vector<std::string>& var_names() const { return var_names_; }

  // inputs: n x v matrix with columns in var_names order.
  Eigen::MatrixXd evaluate(const Eigen::MatrixXd& inputs) const {
    if (inputs.cols() != static_cast<Eigen::Index>(var_names_.size()))
      throw composition_error("PolyBasis: input column count mismatch");
    Eigen::MatrixXd B = Eigen::MatrixXd::Ones(inputs.rows(), dim());
    for (std::size_t t = 1; t < terms_.size(); ++t)
      for (const auto& [var, pow] : terms_[t])
        for (int p = 0; p < pow; ++p)
          B.col(static_cast<Eigen::Index>(t)).array() *= inputs.col(var).array();
    return B;
  }

  std::vector<std::string> term_labels() const {
    std::vector<std::string> out;
    for (const auto& t : terms_) {
      if (t.empty()) {
        out.push_back("1");
        continue;
      }
      std::string s;
      for (std::size_t k = 0; k < t.size(); ++k) {
        if (k) s += '*';
        s += var_names_[static_cast<std::size_t>(t[k].first)];
        if (t[k].second != 1) s += '^' + std::to_string(t[k].second);
      }
      out.push_back(s);
    }
    return out;
  }

  std::string describe() const {
    std::string s = "poly(degree=" + std::to_string(degree_) + "; vars=";
    for (std::size_t j = 0; j < var_names_.size(); ++j) {
      if (j) s += ',';
      s += var_names_[j];
    }
    s += cross_ == BasisCross::none
             ? "; cross=none)"
             : (cross_ == BasisCross::leading_var ? "; cross=leading_var)"
                                                  : "; cross=all_pairs)");
    return s;
  }

 private:
  std::vector<std::string> var_names_;
  int degree_ = 3;
  BasisCross cross_ = BasisCross::leading_var;
  std::vector<std::vector<std::pair<int, int>>> terms_;  // (var index, power)
};

struct LeastSquaresFit {
  Eigen::MatrixXd coef;       // p x m
  Eigen::MatrixXd fitted;     // n x m
  Eigen::MatrixXd residuals;  // n x m
  Eigen::VectorXd rss;        // per response column
};

// Plain multi-response least squares via column-pivoted QR with a rank check.
inline LeastSquaresFit least_squares(const Eigen::MatrixXd& X,
                                     const Eigen::MatrixXd& Y) {
  if (X.rows() != Y.rows()) throw composition_error("least_squares: row mismatch");
  if (X.rows() < X.cols())
    throw underdetermined_error("least_squares: fewer rows than columns");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < X.cols()) {
    const double cond = condition_number(X.transpose() * X);
    throw rank_error("least_squares: rank-deficient design (rank " +
                         std::to_string(qr.rank()) + " of " +
                         std::to_string(X.cols()) + ")",
                     cond);
  }
  LeastSquaresFit fit;
  fit.coef = qr.solve(Y);
  fit.fitted = X * fit.coef;
  fit.residuals = Y - fit.fitted;
  fit.rss = fit.residuals.array().square().colwise().sum();
  return fit;
}

}  // namespace civkit
