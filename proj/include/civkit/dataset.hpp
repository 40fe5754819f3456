#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "civkit/errors.hpp"

namespace civkit {

// Immutable table of named real-valued columns, all of length n. Every
// estimator in the library consumes one of these; operations that "modify"
// a Dataset return a new one.
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::vector<std::string> names, std::vector<Eigen::VectorXd> columns)
      : names_(std::move(names)), columns_(std::move(columns)) {
    if (names_.size() != columns_.size())
      throw schema_error("Dataset: names/columns size mismatch");
    if (names_.empty()) throw schema_error("Dataset: no columns");
    n_ = columns_.front().size();
    if (n_ < 1) throw schema_error("Dataset: empty columns");
    for (std::size_t j = 0; j < names_.size(); ++j) {
      if (columns_[j].size() != n_)
        throw schema_error("Dataset: column '" + names_[j] +
                           "' has inconsistent length");
      if (!index_.emplace(names_[j], j).second)
        throw schema_error("Dataset: duplicate column name '" + names_[j] + "'");
      if (!columns_[j].allFinite())
        throw schema_error("Dataset: column '" + names_[j] +
                           "' contains NaN/Inf after validation");
    }
  }

  Eigen::Index n_rows() const { return n_; }
  std::size_t n_cols() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  bool has_column(const std::string& name) const {
    return index_.count(name) > 0;
  }

  const Eigen::VectorXd& column(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw schema_error("Dataset: no column named '" + name + "'");
    return columns_[it->second];
  }

  const Eigen::VectorXd& column(std::size_t j) const { return columns_.at(j); }

  // New Dataset with one column replaced (or appended when absent).
  Dataset with_column(const std::string& name, Eigen::VectorXd values) const {
    if (values.size() != n_)
      throw schema_error("with_column: length mismatch for '" + name + "'");
    auto names = names_;
    auto cols = columns_;
    auto it = index_.find(name);
    if (it == index_.end()) {
      names.push_back(name);
      cols.push_back(std::move(values));
    } else {
      cols[it->second] = std::move(values);
    }
    return Dataset(std::move(names), std::move(cols));
  }

  Dataset select_rows(const std::vector<Eigen::Index>& rows) const {
    std::vector<Eigen::VectorXd> cols(columns_.size());
    for (std::size_t j = 0; j < columns_.size(); ++j) {
      Eigen::VectorXd v(static_cast<Eigen::Index>(rows.size()));
      for (std::size_t i = 0; i < rows.size(); ++i) v[static_cast<Eigen::Index>(i)] = columns_[j][rows[i]];
      cols[j] = std::move(v);
    }
    return Dataset(names_, std::move(cols));
  }

 private:
  std::vector<std::string> names_;
  std::vector<Eigen::VectorXd> columns_;
  std::unordered_map<std::string, std::size_t> index_;
  Eigen::Index n_ = 0;
};

// Maps dataset columns onto estimator roles. "exposure_or_mediator" is the
// variable the constructed instruments are built from (Z throughout).
struct RoleMap {
  std::string outcome;
  std::vector<std::string> error_prone;
  std::vector<std::string> clean_covariates;
  std::string exposure_or_mediator;
  std::optional<std::string> moderator;

  void validate(const Dataset& ds) const {
    std::vector<std::string> all;
    auto need = [&](const std::string& name, const char* role) {
      if (name.empty()) throw schema_error(std::string("RoleMap: empty ") + role);
      if (!ds.has_column(name))
        throw schema_error("RoleMap: " + std::string(role) + " column '" + name +
                           "' not present in dataset");
      if (std::find(all.begin(), all.end(), name) != all.end())
        throw schema_error("RoleMap: column '" + name +
                           "' assigned to more than one role");
      all.push_back(name);
    };
    need(outcome, "outcome");
    if (error_prone.empty())
      throw schema_error("RoleMap: at least one error-prone column required");
    for (const auto& c : error_prone) need(c, "error_prone");
    for (const auto& c : clean_covariates) need(c, "clean_covariate");
    need(exposure_or_mediator, "exposure_or_mediator");
    if (moderator) {
      if (!ds.has_column(*moderator))
        throw schema_error("RoleMap: moderator column '" + *moderator +
                           "' not present in dataset");
      // The moderator may coincide with a clean covariate; other overlaps
      // are role conflicts.
      if (*moderator == outcome || *moderator == exposure_or_mediator ||
          std::find(error_prone.begin(), error_prone.end(), *moderator) !=
              error_prone.end())
        throw schema_error("RoleMap: moderator overlaps a non-covariate role");
    }
  }
};

enum class NaPolicy { strict, drop };

struct CsvOptions {
  char delimiter = ',';
  NaPolicy na_policy = NaPolicy::strict;
};

struct LoadResult {
  Dataset data;
  int rows_dropped = 0;
  std::vector<std::string> warnings;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line,
                                               char delim) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"' && field.empty()) {
      quoted = true;
    } else if (c == delim) {
      out.push_back(field);
      field.clear();
    } else {
      field += c;
    }
  }
  out.push_back(field);
  return out;
}

inline bool is_na_token(std::string t) {
  for (auto& c : t) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return t.empty() || t == "na" || t == "nan" || t == "null";
}

inline std::optional<double> parse_number(const std::string& t) {
  const char* begin = t.data();
  const char* end = t.data() + t.size();
  while (begin != end && (*begin == ' ' || *begin == '\t')) ++begin;
  while (end != begin && (*(end - 1) == ' ' || *(end - 1) == '\t')) --end;
  double value = 0.0;
  auto [p, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc() || p != end) return std::nullopt;
  return value;
}

}  // namespace detail

// Reads an RFC-4180-style CSV with a header row into a Dataset. Rows with
// missing or non-finite cells are rejected (strict) or dropped (drop); any
// other unparseable token is a parse error regardless of policy.
inline LoadResult read_csv(std::istream& in, const CsvOptions& options = {}) {
  std::string line;
  if (!std::getline(in, line)) throw parse_error("CSV: missing header row");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const auto header = detail::split_csv_line(line, options.delimiter);
  if (header.empty() || (header.size() == 1 && header[0].empty()))
    throw parse_error("CSV: empty header row");

  const std::size_t p = header.size();
  std::vector<std::vector<double>> cols(p);
  int dropped = 0;
  std::vector<std::string> warnings;
  long row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = detail::split_csv_line(line, options.delimiter);
    if (fields.size() != p)
      throw parse_error("CSV: row " + std::to_string(row) + " has " +
                        std::to_string(fields.size()) + " fields, expected " +
                        std::to_string(p));
    std::vector<double> vals(p);
    bool incomplete = false;
    for (std::size_t j = 0; j < p; ++j) {
      if (detail::is_na_token(fields[j])) {
        incomplete = true;
        continue;
      }
      auto v = detail::parse_number(fields[j]);
      if (!v)
        throw parse_error("CSV: non-numeric cell '" + fields[j] + "' at row " +
                          std::to_string(row) + ", column '" + header[j] + "'");
      if (!std::isfinite(*v)) incomplete = true;
      vals[j] = *v;
    }
    if (incomplete) {
      if (options.na_policy == NaPolicy::strict)
        throw parse_error("CSV: missing/non-finite value at row " +
                          std::to_string(row) + " under strict na_policy");
      ++dropped;
      ++row;
      continue;
    }
    for (std::size_t j = 0; j < p; ++j) cols[j].push_back(vals[j]);
    ++row;
  }
  if (cols[0].empty()) throw parse_error("CSV: no complete data rows");
  if (dropped > 0)
    warnings.push_back("dropped " + std::to_string(dropped) +
                       " incomplete row(s) (na_policy=drop)");
  std::vector<Eigen::VectorXd> eig(p);
  for (std::size_t j = 0; j < p; ++j)
    eig[j] = Eigen::Map<const Eigen::VectorXd>(cols[j].data(),
                                               static_cast<Eigen::Index>(cols[j].size()));
  return LoadResult{Dataset(header, std::move(eig)), dropped, std::move(warnings)};
}

inline LoadResult read_csv_file(const std::string& path,
                                const CsvOptions& options = {}) {
  std::ifstream in(path);
  if (!in) throw parse_error("cannot open file: " + path);
  return read_csv(in, options);
}

// Reads a CSV and checks that every role-declared column is present.
inline LoadResult load_dataset(const std::string& path, const RoleMap& roles,
                               const CsvOptions& options = {}) {
  auto result = read_csv_file(path, options);
  roles.validate(result.data);
  return result;
}

// Writes with 17 significant digits so finite doubles round-trip exactly.
inline void write_csv(const Dataset& ds, std::ostream& out, char delimiter = ',') {
  auto quote_if_needed = [&](const std::string& s) {
    if (s.find_first_of(std::string{delimiter} + "\"\n") == std::string::npos)
      return s;
    std::string q = "\"";
    for (char c : s) {
      if (c == '"') q += "\"\"";
      else q += c;
    }
    q += '"';
    return q;
  };
  for (std::size_t j = 0; j < ds.n_cols(); ++j) {
    if (j) out << delimiter;
    out << quote_if_needed(ds.names()[j]);
  }
  out << '\n';
  char buf[40];
  for (Eigen::Index i = 0; i < ds.n_rows(); ++i) {
    for (std::size_t j = 0; j < ds.n_cols(); ++j) {
      if (j) out << delimiter;
      std::snprintf(buf, sizeof(buf), "%.17g", ds.column(j)[i]);
      out << buf;
    }
    out << '\n';
  }
}

inline void write_csv_file(const Dataset& ds, const std::string& path,
                           char delimiter = ',') {
  std::ofstream out(path);
  if (!out) throw parse_error("cannot open file for writing: " + path);
  write_csv(ds, out, delimiter);
}

enum class TransformKind { center, log, log_center };

// Returns a new Dataset with the named column transformed. Centering
// subtracts the sample mean; log variants require strictly positive values.
inline Dataset transform_column(const Dataset& ds, const std::string& name,
                                TransformKind kind) {
  Eigen::VectorXd v = ds.column(name);
  if (kind == TransformKind::log || kind == TransformKind::log_center) {
    for (Eigen::Index i = 0; i < v.size(); ++i)
      if (v[i] <= 0.0)
        throw domain_error("transform_column(log): non-positive value in '" +
                           name + "' at row " + std::to_string(i));
    v = v.array().log().matrix();
  }
  if (kind == TransformKind::center || kind == TransformKind::log_center)
    v.array() -= v.mean();
  return ds.with_column(name, std::move(v));
}

}  // namespace civkit
