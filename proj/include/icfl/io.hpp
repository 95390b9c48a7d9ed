#ifndef ICFL_IO_HPP
#define ICFL_IO_HPP

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "icfl/dynamics.hpp"
#include "icfl/ensemble.hpp"
#include "icfl/landscape.hpp"
#include "icfl/objective.hpp"
#include "icfl/quadrature.hpp"
#include "icfl/spectral.hpp"

namespace icfl {

inline constexpr const char* kEnsembleMagic = "# icfl-ensemble v1";

/// Text table: magic line, "k d N", then one row per particle holding
/// weight, a (k values), w (d values) at round-trip precision.
void write_ensemble(std::ostream& os, const Ensembled& mu);
Ensembled read_ensemble(std::istream& is);
void save_ensemble(const std::filesystem::path& path, const Ensembled& mu);
Ensembled load_ensemble(const std::filesystem::path& path);

/// Shortest decimal string that parses back to the same double.
std::string format_double(double v);

nlohmann::json matrix_to_json(const MatrixXd& m);
MatrixXd matrix_from_json(const nlohmann::json& j);

nlohmann::json to_json(const EvalSetDescriptor& desc);
EvalSetDescriptor eval_descriptor_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CovPackd& cp);
nlohmann::json to_json(const ProbeReport<double>& rep);
nlohmann::json to_json(const SpectralReport<double>& rep, bool include_psi = true);

/// Writes the provenance comment line and the header row on construction,
/// then one row per call.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::string& provenance, const std::vector<std::string>& columns);
  void row(const std::vector<std::string>& cells);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::size_t columns_;
};

void write_train_log(const std::filesystem::path& path, const std::string& provenance, const TrainLog<double>& log);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace icfl

#endif  // ICFL_IO_HPP
