#ifndef BDQ_MATRIX_IO_HPP_
#define BDQ_MATRIX_IO_HPP_

#include <string>

#include "bdq/types.hpp"

namespace bdq {

// BDQ1: magic "BDQ1", u32 LE rows, u32 LE cols, f64 LE row-major payload.
void save_bdq1(const Matrix& m, const std::string& path);
Matrix load_bdq1(const std::string& path);

// One matrix row per line, comma separated.
void save_csv(const Matrix& m, const std::string& path);
Matrix load_csv(const std::string& path);

// Dispatch on extension: ".csv" text, anything else BDQ1.
void save_matrix(const Matrix& m, const std::string& path);
Matrix load_matrix(const std::string& path);

}  // namespace bdq

#endif  // BDQ_MATRIX_IO_HPP_
