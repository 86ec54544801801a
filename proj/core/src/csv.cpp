#include "cpe/csv.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace cpe {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  for (char ch : line) {
    if (ch == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (ch != '\r') {
      cell.push_back(ch);
    }
  }
  cells.push_back(cell);
  for (auto& c : cells) {
    while (!c.empty() && (c.front() == ' ' || c.front() == '\t')) c.erase(c.begin());
    while (!c.empty() && (c.back() == ' ' || c.back() == '\t')) c.pop_back();
  }
  return cells;
}

double parse_cell(const std::string& cell, const std::string& column, std::size_t row) {
  double value = 0.0;
  auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc{} || ptr != cell.data() + cell.size()) {
    throw Error(ErrorKind::UnparsableCell, "cannot parse '" + cell + "' in column '" + column +
                                               "' at data row " + std::to_string(row));
  }
  return value;
}

int find_column(const std::vector<std::string>& header, const std::string& name) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) {
    throw Error(ErrorKind::MissingColumn, "required column '" + name + "' not found");
  }
  return static_cast<int>(it - header.begin());
}

}  // namespace

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoFailure, "cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::EmptyDataset, "'" + path + "' is empty");
  const std::vector<std::string> header = split_line(line);

  const int id_col = find_column(header, schema.cluster_id);
  const int y_col = find_column(header, schema.y);
  const int a_col = find_column(header, schema.a);

  std::vector<int> cov_cols;
  std::vector<std::string> cov_names;
  if (!schema.covariates.empty()) {
    for (const auto& name : schema.covariates) {
      cov_cols.push_back(find_column(header, name));
      cov_names.push_back(name);
    }
  } else {
    for (int c = 0; c < static_cast<int>(header.size()); ++c) {
      if (c == id_col || c == y_col || c == a_col) continue;
      if (std::find(schema.exclude.begin(), schema.exclude.end(), header[c]) !=
          schema.exclude.end())
        continue;
      cov_cols.push_back(c);
      cov_names.push_back(header[c]);
    }
  }

  struct RawCluster {
    std::vector<double> y, a, x;
  };
  std::vector<std::string> order;
  std::map<std::string, RawCluster> groups;

  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != header.size()) {
      throw Error(ErrorKind::UnparsableCell,
                  "data row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                      " cells, header has " + std::to_string(header.size()));
    }
    const std::string& id = cells[static_cast<std::size_t>(id_col)];
    auto it = groups.find(id);
    if (it == groups.end()) {
      it = groups.emplace(id, RawCluster{}).first;
      order.push_back(id);
    }
    RawCluster& g = it->second;
    g.y.push_back(parse_cell(cells[static_cast<std::size_t>(y_col)], schema.y, row));
    g.a.push_back(parse_cell(cells[static_cast<std::size_t>(a_col)], schema.a, row));
    for (std::size_t k = 0; k < cov_cols.size(); ++k) {
      g.x.push_back(parse_cell(cells[static_cast<std::size_t>(cov_cols[k])], cov_names[k], row));
    }
  }

  Dataset data;
  data.p = static_cast<int>(cov_cols.size());
  data.column_names = cov_names;
  data.clusters.reserve(order.size());
  for (const auto& id : order) {
    RawCluster& g = groups[id];
    ClusterObservation c;
    c.n = static_cast<int>(g.y.size());
    c.p = data.p;
    c.y = std::move(g.y);
    c.a = std::move(g.a);
    c.x = std::move(g.x);
    data.clusters.push_back(std::move(c));
  }
  return data;
}

void write_csv(const Dataset& data, const std::string& path, const CsvSchema& schema) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::IoFailure, "cannot write '" + path + "'");

  out << schema.cluster_id << ',' << schema.y << ',' << schema.a;
  for (const auto& name : data.column_names) out << ',' << name;
  out << '\n';

  char buf[64];
  auto fmt = [&buf](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
  };
  for (int i = 0; i < data.m(); ++i) {
    const ClusterObservation& c = data.clusters[i];
    for (int j = 0; j < c.n; ++j) {
      out << (i + 1) << ',' << fmt(c.y[j]) << ',' << fmt(c.a[j]);
      for (int k = 0; k < data.p; ++k) out << ',' << fmt(c.x[static_cast<std::size_t>(j) * data.p + k]);
      out << '\n';
    }
  }
}

}  // namespace cpe
