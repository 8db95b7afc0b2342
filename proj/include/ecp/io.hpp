#pragma once

#include <initializer_list>
#include <string>

#include <json.hpp>

#include "ecp/bounds.hpp"
#include "ecp/conformal.hpp"
#include "ecp/datagen.hpp"
#include "ecp/diffsort.hpp"
#include "ecp/federated.hpp"
#include "ecp/setsize.hpp"
#include "ecp/sideinfo.hpp"
#include "ecp/training.hpp"

namespace ecp {

using Json = nlohmann::ordered_json;

/// Raised for malformed documents; the message names the offending field.
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Throws ConfigError when `j` is not an object or holds a key outside `allowed`.
void require_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where);

/// Doubles that may be infinite are written as "inf" / "-inf".
Json real_to_json(double v);
double real_from_json(const Json& j);

void to_json(Json& j, const RngSeed& s);
void from_json(const Json& j, RngSeed& s);
void to_json(Json& j, const Matrix& m);
void from_json(const Json& j, Matrix& m);
void to_json(Json& j, const ScoreSpec& s);
void from_json(const Json& j, ScoreSpec& s);
void to_json(Json& j, const RelaxConfig& r);
void from_json(const Json& j, RelaxConfig& r);
void to_json(Json& j, const Calibration& c);
void from_json(const Json& j, Calibration& c);
void to_json(Json& j, const BoundReport& r);
void from_json(const Json& j, BoundReport& r);
void to_json(Json& j, const QuantizerModel& q);
void from_json(const Json& j, QuantizerModel& q);
void to_json(Json& j, const ClampedBound& b);
void to_json(Json& j, const QuantizedStudyRow& r);
void to_json(Json& j, const ModelSpec& s);
void from_json(const Json& j, ModelSpec& s);
void to_json(Json& j, const Model& m);
void from_json(const Json& j, Model& m);
void to_json(Json& j, const TrainConfig& c);
void from_json(const Json& j, TrainConfig& c);
void to_json(Json& j, const EpochMetrics& m);
void to_json(Json& j, const SiReport& r);
void to_json(Json& j, const FederatedConfig& c);
void from_json(const Json& j, FederatedConfig& c);
void to_json(Json& j, const FedRoundMetrics& m);
void to_json(Json& j, const GaussianMixtureSpec& s);
void from_json(const Json& j, GaussianMixtureSpec& s);
void to_json(Json& j, const DiscreteTaskSpec& s);
void from_json(const Json& j, DiscreteTaskSpec& s);

Json read_json_file(const std::string& path);
/// Writes through a temporary file and renames it into place.
void write_text_atomic(const std::string& path, const std::string& text);
void write_json_file(const std::string& path, const Json& j);

}  // namespace ecp
