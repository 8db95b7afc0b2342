#include "ecp/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace ecp {

namespace {

std::size_t sample_categorical(std::span<const double> p, double u) {
  double acc = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    acc += p[k];
    if (u < acc) return k;
  }
  // Round-off: return the last label with positive mass.
  for (std::size_t k = p.size(); k-- > 0;) {
    if (p[k] > 0.0) return k;
  }
  return p.size() - 1;
}

double log_sum_exp(std::span<const double> v) {
  double m = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

void check_row(std::span<const double> row, const char* what) {
  double total = 0.0;
  for (double v : row) {
    if (!(v >= 0.0)) throw std::invalid_argument(std::string(what) + ": negative entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw std::invalid_argument(std::string(what) + ": row not normalized");
  }
}

}  // namespace

void GaussianMixtureSpec::validate() const {
  if (num_labels < 1 || dim < 1) throw std::invalid_argument("mixture needs K >= 1 and dim >= 1");
  auto k = static_cast<std::size_t>(num_labels);
  auto d = static_cast<std::size_t>(dim);
  if (means.rows() != k || means.cols() != d) throw std::invalid_argument("means shape mismatch");
  if (diag_vars.rows() != k || diag_vars.cols() != d) {
    throw std::invalid_argument("diag_vars shape mismatch");
  }
  for (double v : diag_vars.data()) {
    if (!(v > 0.0)) throw std::invalid_argument("variances must be positive");
  }
  if (priors.size() != k) throw std::invalid_argument("priors length mismatch");
  double total = 0.0;
  for (double p : priors) {
    if (!(p >= 0.0)) throw std::invalid_argument("negative prior");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("priors must sum to 1");
  if (!label_groups.empty()) {
    if (label_groups.size() != k) throw std::invalid_argument("label_groups length mismatch");
    for (int g : label_groups) {
      if (g < 0) throw std::invalid_argument("negative label group");
    }
  }
}

int GaussianMixtureSpec::num_groups() const {
  if (label_groups.empty()) return 0;
  return *std::max_element(label_groups.begin(), label_groups.end()) + 1;
}

int DiscreteTaskSpec::num_labels() const {
  return conditional.empty() ? 0 : static_cast<int>(conditional.front().size());
}

int DiscreteTaskSpec::num_groups() const {
  if (group_table.empty() || group_table.front().empty()) return 0;
  return static_cast<int>(group_table.front().front().size());
}

void DiscreteTaskSpec::validate() const {
  if (marginal.empty()) throw std::invalid_argument("discrete task needs a nonempty support");
  if (conditional.size() != marginal.size()) {
    throw std::invalid_argument("conditional rows must match support size");
  }
  check_row(marginal, "marginal p(x)");
  const auto k = conditional.front().size();
  if (k == 0) throw std::invalid_argument("discrete task needs K >= 1");
  for (const auto& row : conditional) {
    if (row.size() != k) throw std::invalid_argument("conditional rows differ in length");
    check_row(row, "conditional p(y|x)");
  }
  if (!group_table.empty()) {
    if (group_table.size() != marginal.size()) throw std::invalid_argument("group table shape");
    const auto g = group_table.front().empty() ? 0 : group_table.front().front().size();
    if (g == 0) throw std::invalid_argument("group table needs G >= 1");
    for (const auto& per_x : group_table) {
      if (per_x.size() != k) throw std::invalid_argument("group table shape");
      for (const auto& row : per_x) {
        if (row.size() != g) throw std::invalid_argument("group rows differ in length");
        check_row(row, "group table p(z|x,y)");
      }
    }
  }
}

LabeledDataset gen_gaussian_mixture(const GaussianMixtureSpec& spec, std::size_t n, RngSeed seed) {
  spec.validate();
  if (n == 0) throw std::invalid_argument("n must be >= 1");
  LabeledDataset ds;
  ds.num_labels = spec.num_labels;
  ds.features = Matrix(n, static_cast<std::size_t>(spec.dim));
  ds.labels.resize(n);
  const bool grouped = !spec.label_groups.empty();
  if (grouped) {
    ds.num_groups = spec.num_groups();
    ds.side_info.resize(n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    auto y = sample_categorical(spec.priors, rng.uniform());
    ds.labels[i] = static_cast<int>(y);
    auto row = ds.features.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      row[j] = spec.means(y, j) + std::sqrt(spec.diag_vars(y, j)) * rng.normal();
    }
    if (grouped) ds.side_info[i] = spec.label_groups[y];
  }
  return ds;
}

ProbVector gmm_posterior(const GaussianMixtureSpec& spec, std::span<const double> x) {
  const auto k = static_cast<std::size_t>(spec.num_labels);
  if (x.size() != static_cast<std::size_t>(spec.dim)) throw std::invalid_argument("x dim mismatch");
  std::vector<double> logp(k);
  for (std::size_t y = 0; y < k; ++y) {
    if (spec.priors[y] <= 0.0) {
      logp[y] = -std::numeric_limits<double>::infinity();
      continue;
    }
    double lp = std::log(spec.priors[y]);
    for (std::size_t j = 0; j < x.size(); ++j) {
      double var = spec.diag_vars(y, j);
      double diff = x[j] - spec.means(y, j);
      lp -= 0.5 * (diff * diff / var + std::log(2.0 * std::numbers::pi * var));
    }
    logp[y] = lp;
  }
  double norm = log_sum_exp(logp);
  ProbVector post(k);
  for (std::size_t y = 0; y < k; ++y) post[y] = std::exp(logp[y] - norm);
  return post;
}

MonteCarloEstimate gmm_cond_entropy_mc(const GaussianMixtureSpec& spec, std::size_t n_mc,
                                       RngSeed seed) {
  if (n_mc == 0) throw std::invalid_argument("n_mc must be >= 1");
  auto ds = gen_gaussian_mixture(spec, n_mc, seed);
  double sum = 0.0;
  double sum_sq = 0.0;
  for (std::size_t i = 0; i < n_mc; ++i) {
    double h = entropy(gmm_posterior(spec, ds.features.row(i)));
    sum += h;
    sum_sq += h * h;
  }
  double n = static_cast<double>(n_mc);
  double mean = sum / n;
  double var = n_mc > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0)) : 0.0;
  return {mean, std::sqrt(var / n)};
}

LabeledDataset gen_discrete_task(const DiscreteTaskSpec& spec, std::size_t n, RngSeed seed) {
  spec.validate();
  LabeledDataset ds;
  ds.num_labels = spec.num_labels();
  ds.features = Matrix(n, spec.support_size());
  ds.labels.resize(n);
  if (spec.has_groups()) {
    ds.num_groups = spec.num_groups();
    ds.side_info.resize(n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    auto x = sample_categorical(spec.marginal, rng.uniform());
    auto y = sample_categorical(spec.conditional[x], rng.uniform());
    ds.features(i, x) = 1.0;
    ds.labels[i] = static_cast<int>(y);
    if (spec.has_groups()) {
      ds.side_info[i] = static_cast<int>(sample_categorical(spec.group_table[x][y], rng.uniform()));
    }
  }
  return ds;
}

double discrete_exact_entropy(const DiscreteTaskSpec& spec) {
  spec.validate();
  double h = 0.0;
  for (std::size_t x = 0; x < spec.support_size(); ++x) {
    h += spec.marginal[x] * entropy(spec.conditional[x]);
  }
  return h;
}

double discrete_exact_entropy_given_z(const DiscreteTaskSpec& spec) {
  spec.validate();
  if (!spec.has_groups()) throw std::invalid_argument("task has no group table");
  const auto k = static_cast<std::size_t>(spec.num_labels());
  const auto g = static_cast<std::size_t>(spec.num_groups());
  double h = 0.0;
  for (std::size_t x = 0; x < spec.support_size(); ++x) {
    for (std::size_t z = 0; z < g; ++z) {
      std::vector<double> joint(k);
      double pz = 0.0;
      for (std::size_t y = 0; y < k; ++y) {
        joint[y] = spec.conditional[x][y] * spec.group_table[x][y][z];
        pz += joint[y];
      }
      if (pz <= 0.0) continue;
      for (double& v : joint) v /= pz;
      h += spec.marginal[x] * pz * entropy(joint);
    }
  }
  return h;
}

std::size_t one_hot_index(std::span<const double> row) {
  return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

GaussianMixtureSpec make_grouped_mixture(int positions, int groups, double radius,
                                         double variance) {
  GaussianMixtureSpec spec;
  spec.num_labels = positions * groups;
  spec.dim = 2;
  const auto k = static_cast<std::size_t>(spec.num_labels);
  spec.means = Matrix(k, 2);
  spec.diag_vars = Matrix(k, 2, variance);
  spec.priors.assign(k, 1.0 / static_cast<double>(k));
  spec.label_groups.resize(k);
  for (std::size_t y = 0; y < k; ++y) {
    auto pos = static_cast<double>(y % static_cast<std::size_t>(positions));
    double angle = 2.0 * std::numbers::pi * pos / positions;
    spec.means(y, 0) = radius * std::cos(angle);
    spec.means(y, 1) = radius * std::sin(angle);
    spec.label_groups[y] = static_cast<int>(y / static_cast<std::size_t>(positions));
  }
  return spec;
}

GaussianMixtureSpec make_ring_mixture(int num_labels, int dim, double radius, double variance) {
  if (dim < 2) throw std::invalid_argument("ring mixture needs dim >= 2");
  GaussianMixtureSpec spec;
  spec.num_labels = num_labels;
  spec.dim = dim;
  const auto k = static_cast<std::size_t>(num_labels);
  spec.means = Matrix(k, static_cast<std::size_t>(dim));
  spec.diag_vars = Matrix(k, static_cast<std::size_t>(dim), variance);
  spec.priors.assign(k, 1.0 / static_cast<double>(k));
  for (std::size_t y = 0; y < k; ++y) {
    double angle = 2.0 * std::numbers::pi * static_cast<double>(y) / num_labels;
    spec.means(y, 0) = radius * std::cos(angle);
    spec.means(y, 1) = radius * std::sin(angle);
  }
  return spec;
}

// --- IDX ---------------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t offset,
                        const std::string& path) {
  if (offset + 4 > buf.size()) throw std::runtime_error("truncated IDX header in " + path);
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

}  // namespace

LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  auto img = read_file(images_path);
  auto lab = read_file(labels_path);
  auto img_magic = read_be32(img, 0, images_path);
  if (img_magic != 0x00000803U) {
    throw std::runtime_error("bad IDX image magic in " + images_path);
  }
  auto lab_magic = read_be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801U) {
    throw std::runtime_error("bad IDX label magic in " + labels_path);
  }
  std::size_t n = read_be32(img, 4, images_path);
  std::size_t rows = read_be32(img, 8, images_path);
  std::size_t cols = read_be32(img, 12, images_path);
  std::size_t n_labels = read_be32(lab, 4, labels_path);
  if (n != n_labels) {
    throw std::runtime_error("IDX image count " + std::to_string(n) + " != label count " +
                             std::to_string(n_labels));
  }
  const std::size_t dim = rows * cols;
  if (img.size() < 16 + n * dim) throw std::runtime_error("truncated IDX image data");
  if (lab.size() < 8 + n) throw std::runtime_error("truncated IDX label data");

  LabeledDataset ds;
  ds.features = Matrix(n, dim);
  ds.labels.resize(n);
  auto& data = ds.features.data();
  for (std::size_t i = 0; i < n * dim; ++i) data[i] = static_cast<double>(img[16 + i]) / 255.0;
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = static_cast<int>(lab[8 + i]);
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.num_labels = max_label + 1;
  return ds;
}

// --- CSV ---------------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    auto b = cell.find_first_not_of(" \t\r");
    auto e = cell.find_last_not_of(" \t\r");
    out.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

bool parse_nonneg_int(const std::string& s, int& out) {
  if (s.empty()) return false;
  for (char c : s) {
    if (c < '0' || c > '9') return false;
  }
  out = std::stoi(s);
  return true;
}

}  // namespace

LabeledDataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty CSV " + path);
  auto header = split_csv_line(line);
  std::ptrdiff_t label_col = -1;
  std::ptrdiff_t side_col = -1;
  std::vector<std::size_t> feature_cols;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == schema.label_column) {
      label_col = static_cast<std::ptrdiff_t>(c);
    } else if (schema.side_info_column && header[c] == *schema.side_info_column) {
      side_col = static_cast<std::ptrdiff_t>(c);
    } else {
      feature_cols.push_back(c);
    }
  }
  if (label_col < 0) throw std::runtime_error("CSV has no label column '" + schema.label_column + "'");
  if (schema.side_info_column && side_col < 0) {
    throw std::runtime_error("CSV has no side-info column '" + *schema.side_info_column + "'");
  }

  std::vector<std::vector<double>> rows;
  std::vector<std::string> raw_labels;
  std::vector<int> side;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " columns, got " +
                               std::to_string(cells.size()));
    }
    std::vector<double> row;
    row.reserve(feature_cols.size());
    for (auto c : feature_cols) {
      try {
        row.push_back(std::stod(cells[c]));
      } catch (const std::exception&) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": non-numeric feature '" +
                                 cells[c] + "'");
      }
    }
    rows.push_back(std::move(row));
    raw_labels.push_back(cells[static_cast<std::size_t>(label_col)]);
    if (side_col >= 0) {
      const auto& s = cells[static_cast<std::size_t>(side_col)];
      int z = kMissingGroup;
      if (!s.empty() && !parse_nonneg_int(s, z)) {
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": bad side info '" + s + "'");
      }
      side.push_back(z);
    }
  }

  LabeledDataset ds;
  ds.features = rows.empty() ? Matrix(0, feature_cols.size()) : Matrix::from_rows(rows);
  bool all_int = true;
  std::vector<int> ints(raw_labels.size());
  for (std::size_t i = 0; i < raw_labels.size() && all_int; ++i) {
    all_int = parse_nonneg_int(raw_labels[i], ints[i]);
  }
  if (all_int) {
    ds.labels = ints;
    ds.num_labels = ints.empty() ? 0 : *std::max_element(ints.begin(), ints.end()) + 1;
  } else {
    std::map<std::string, int> ids;
    for (const auto& s : raw_labels) ids.emplace(s, 0);
    int next = 0;
    for (auto& [name, id] : ids) id = next++;
    for (const auto& s : raw_labels) ds.labels.push_back(ids.at(s));
    ds.num_labels = next;
  }
  if (side_col >= 0) {
    ds.side_info = side;
    int g = 0;
    for (int z : side) g = std::max(g, z + 1);
    ds.num_groups = g;
  }
  ds.validate();
  return ds;
}

// --- ECD1 ------------------------------------------------------------------------------

namespace {

template <typename T>
void put(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("truncated dataset file " + path);
  }
  return v;
}

}  // namespace

void save_dataset(const LabeledDataset& ds, const std::string& path) {
  ds.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write("ECD1", 4);
  put<std::uint64_t>(out, ds.size());
  put<std::uint64_t>(out, ds.dim());
  put<std::uint64_t>(out, static_cast<std::uint64_t>(ds.num_labels));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(ds.num_groups));
  for (double v : ds.features.data()) put<double>(out, v);
  for (int y : ds.labels) put<std::int32_t>(out, y);
  if (ds.num_groups > 0) {
    for (std::size_t i = 0; i < ds.size(); ++i) {
      put<std::int32_t>(out, ds.has_side_info() ? ds.side_info[i] : kMissingGroup);
    }
  }
}

LabeledDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "ECD1", 4) != 0) {
    throw std::runtime_error("bad dataset magic in " + path);
  }
  auto n = get<std::uint64_t>(in, path);
  auto dim = get<std::uint64_t>(in, path);
  auto k = get<std::uint64_t>(in, path);
  auto g = get<std::uint64_t>(in, path);
  LabeledDataset ds;
  ds.num_labels = static_cast<int>(k);
  ds.num_groups = static_cast<int>(g);
  ds.features = Matrix(n, dim);
  for (double& v : ds.features.data()) v = get<double>(in, path);
  ds.labels.resize(n);
  for (auto& y : ds.labels) y = get<std::int32_t>(in, path);
  if (g > 0) {
    ds.side_info.resize(n);
    for (auto& z : ds.side_info) z = get<std::int32_t>(in, path);
  }
  ds.validate();
  return ds;
}

}  // namespace ecp
