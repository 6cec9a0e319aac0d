#pragma once

#include "reinseg/params.hpp"

#include <string>

namespace reinseg {

/// Weight-exchange directory: `index.txt` lines `<param-name> <file>`, each
/// file a one-line ASCII header "rows cols" followed by row-major
/// little-endian float32 data. Lets externally trained weights be dropped
/// into a backbone without any framework dependency.
void export_weight_manifest(const std::string& dir, const ParamStore& store);

/// Loads every parameter of the store from the manifest. Unknown index
/// names, parameters missing from the index, or shape mismatches raise
/// ValidationError; unreadable files raise IoError. Values are widened from
/// float32 to the working float64.
void import_weight_manifest(const std::string& dir, ParamStore& store);

}  // namespace reinseg
