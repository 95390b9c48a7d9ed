#include "icfl/io.hpp"

#include <charconv>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace icfl {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_ensemble(std::ostream& os, const Ensembled& mu) {
  os << kEnsembleMagic << '\n' << mu.k() << ' ' << mu.d() << ' ' << mu.size() << '\n';
  for (Eigen::Index j = 0; j < mu.size(); ++j) {
    os << format_double(mu.weights()(j));
    for (Eigen::Index c = 0; c < mu.k(); ++c) os << ' ' << format_double(mu.a()(j, c));
    for (Eigen::Index c = 0; c < mu.d(); ++c) os << ' ' << format_double(mu.w()(j, c));
    os << '\n';
  }
}

Ensembled read_ensemble(std::istream& is) {
  std::string magic;
  std::getline(is, magic);
  if (magic != kEnsembleMagic) throw std::runtime_error("not an ensemble file (bad header line)");
  Eigen::Index k = 0, d = 0, n = 0;
  if (!(is >> k >> d >> n) || k < 1 || d < 1 || n < 1) throw std::runtime_error("ensemble file: bad dimension line");
  MatrixXd a(n, k), w(n, d);
  VectorXd weights(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    if (!(is >> weights(j))) throw std::runtime_error("ensemble file: truncated at row " + std::to_string(j));
    for (Eigen::Index c = 0; c < k; ++c)
      if (!(is >> a(j, c))) throw std::runtime_error("ensemble file: truncated at row " + std::to_string(j));
    for (Eigen::Index c = 0; c < d; ++c)
      if (!(is >> w(j, c))) throw std::runtime_error("ensemble file: truncated at row " + std::to_string(j));
  }
  // Weights are stored with round-trip precision but their sum may still be
  // off by an ulp or two.
  weights /= weights.sum();
  return Ensembled(std::move(a), std::move(w), std::move(weights));
}

void save_ensemble(const std::filesystem::path& path, const Ensembled& mu) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  write_ensemble(os, mu);
}

Ensembled load_ensemble(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return read_ensemble(is);
}

nlohmann::json matrix_to_json(const MatrixXd& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

MatrixXd matrix_from_json(const nlohmann::json& j) {
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = rows ? static_cast<Eigen::Index>(j.at(0).size()) : 0;
  MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    if (static_cast<Eigen::Index>(j.at(r).size()) != cols) throw std::runtime_error("ragged matrix in JSON");
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

nlohmann::json to_json(const EvalSetDescriptor& desc) {
  return {{"seed", desc.seed}, {"size", desc.size}, {"dim", desc.dim}, {"dist", to_string(desc.dist)}};
}

EvalSetDescriptor eval_descriptor_from_json(const nlohmann::json& j) {
  EvalSetDescriptor desc;
  desc.seed = j.at("seed").get<std::uint64_t>();
  desc.size = j.at("size").get<Eigen::Index>();
  desc.dim = j.at("dim").get<Eigen::Index>();
  desc.dist = input_distribution_from_name(j.at("dist").get<std::string>());
  return desc;
}

nlohmann::json to_json(const CovPackd& cp) {
  return {{"loss", cp.loss},
          {"r_lo", cp.r_lo},
          {"r_hi", cp.r_hi},
          {"floor_active", cp.floor_active},
          {"sigma_mm", matrix_to_json(cp.sigma_mm)},
          {"sigma_om", matrix_to_json(cp.sigma_om)},
          {"sigma_oo", matrix_to_json(cp.sigma_oo)},
          {"w_opt", matrix_to_json(cp.w_opt)},
          {"b", matrix_to_json(cp.b)},
          {"l_mat", matrix_to_json(cp.l_mat)}};
}

nlohmann::json to_json(const ProbeReport<double>& rep) {
  const auto& b = rep.band;
  return {{"loss", rep.loss},
          {"slope", rep.slope},
          {"curvature", rep.curvature},
          {"nuclear_norm_lb", rep.nuclear_norm_lb},
          {"steepest_rotation", matrix_to_json(rep.steepest)},
          {"symmetrizing_rotation", matrix_to_json(rep.symmetrizing)},
          {"band",
           {{"class", to_string(b.band)},
            {"r_lo", b.r_lo},
            {"lower", b.lower},
            {"upper", b.upper},
            {"half_r", b.half_r},
            {"c", b.c},
            {"vacuous", b.vacuous},
            {"guarantee_applies", b.guarantee_applies}}}};
}

nlohmann::json to_json(const SpectralReport<double>& rep, bool include_psi) {
  nlohmann::json j = {{"n", rep.n},
                      {"m", rep.m},
                      {"lambda_0", rep.lambda_0},
                      {"alpha", rep.alpha},
                      {"asymmetry", rep.asymmetry},
                      {"eigenvalues", std::vector<double>(rep.eigenvalues.data(),
                                                          rep.eigenvalues.data() + rep.eigenvalues.size())}};
  if (include_psi) j["psi_0"] = matrix_to_json(rep.psi_0);
  return j;
}

CsvWriter::CsvWriter(const std::filesystem::path& path, const std::string& provenance,
                     const std::vector<std::string>& columns)
    : path_(path), out_(path), columns_(columns.size()) {
  if (!out_) throw std::runtime_error("cannot write " + path.string());
  out_ << "# " << provenance << '\n';
  for (std::size_t i = 0; i < columns.size(); ++i) out_ << (i ? "," : "") << columns[i];
  out_ << '\n';
}

void CsvWriter::row(const std::vector<std::string>& cells) {
  if (cells.size() != columns_) throw std::logic_error("CSV row has the wrong number of cells");
  for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
  out_ << '\n';
}

void write_train_log(const std::filesystem::path& path, const std::string& provenance, const TrainLog<double>& log) {
  CsvWriter csv(path, provenance, {"step", "loss", "m_a", "sigma_min", "sigma_max", "event"});
  for (const auto& r : log.records)
    csv.row({std::to_string(r.step), format_double(r.loss), format_double(r.m_a), format_double(r.sigma_min),
             format_double(r.sigma_max), event_name(r.event)});
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

}  // namespace icfl
