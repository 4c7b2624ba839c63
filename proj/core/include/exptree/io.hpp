#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include "exptree/data.hpp"
#include "exptree/density.hpp"
#include "exptree/fitting.hpp"
#include "exptree/trees.hpp"

namespace exptree {

// JSON documents, each tagged with a "format" field:
//   exptree-encoding/1  BinningSpec (column encodings and target name)
//   exptree-density/1   MixtureDensity
//   exptree-model/1     ForestModel, nodes written in id order
// Doubles use shortest round-trip formatting, so write/read is exact.

std::string encoding_to_json(const BinningSpec& spec);
BinningSpec encoding_from_json(std::string_view text);

std::string density_to_json(const MixtureDensity& d);
MixtureDensity density_from_json(std::string_view text);

std::string model_to_json(const ForestModel& forest);
ForestModel model_from_json(std::string_view text);

std::string refit_report_to_json(const RefitReport& report);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view text);

/// 64-bit FNV-1a digest as 16 hex digits.
std::string fingerprint(std::string_view text);

}  // namespace exptree
