#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace civkit {

// Base of all civkit exceptions. Two families, matching the CLI exit codes:
// user_error (bad input / bad request, exit 1) and numeric_error (estimation
// failure on valid input, exit 2).
class error : public std::runtime_error {
 public:
  explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

class user_error : public error {
 public:
  using error::error;
};

class numeric_error : public error {
 public:
  using error::error;
};

// -- user errors --------------------------------------------------------

// A referenced column/role does not exist or violates the declared schema.
class schema_error : public user_error {
 public:
  using user_error::user_error;
};

// Malformed file contents (CSV cell that cannot be parsed, bad config JSON).
class parse_error : public user_error {
 public:
  using user_error::user_error;
};

// A value outside the mathematical domain of the requested transform.
class domain_error : public user_error {
 public:
  using user_error::user_error;
};

// Incompatible pieces composed together (non-nested models, conflicting
// shared-parameter declarations, mismatched moderator coding, ...).
class composition_error : public user_error {
 public:
  using user_error::user_error;
};

// An operation's stated precondition was violated by the caller.
class precondition_error : public user_error {
 public:
  using user_error::user_error;
};

// Regression target has more basis terms than the sample can support.
class underdetermined_error : public user_error {
 public:
  using user_error::user_error;
};

// A non-intercept design column is constant.
class degenerate_column_error : public user_error {
 public:
  using user_error::user_error;
};

// Operation not available for this kind of fit.
class unsupported_error : public user_error {
 public:
  using user_error::user_error;
};

// -- numeric errors ------------------------------------------------------

// Singular or numerically rank-deficient system; carries the condition
// number estimate when one is available.
class rank_error : public numeric_error {
 public:
  explicit rank_error(const std::string& msg, double condition_number = 0.0)
      : numeric_error(msg), condition_number_(condition_number) {}
  double condition_number() const { return condition_number_; }

 private:
  double condition_number_;
};

// Iterative solver failed to converge; carries the last iterate.
class convergence_error : public numeric_error {
 public:
  explicit convergence_error(const std::string& msg,
                             std::vector<double> last_iterate = {})
      : numeric_error(msg), last_iterate_(std::move(last_iterate)) {}
  const std::vector<double>& last_iterate() const { return last_iterate_; }

 private:
  std::vector<double> last_iterate_;
};

// Identifying denominator is (numerically) zero.
class identification_error : public numeric_error {
 public:
  using numeric_error::numeric_error;
};

// Too many observations hit a conditioning floor.
class conditioning_error : public numeric_error {
 public:
  using numeric_error::numeric_error;
};

// Resampling pipeline failed too often to trust the interval.
class instability_error : public numeric_error {
 public:
  using numeric_error::numeric_error;
};

}  // namespace civkit
