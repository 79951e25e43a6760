#pragma once

#include <iosfwd>
#include <string>

#include "faxbev/tensor.hpp"

namespace faxbev {

// ".tdump" binary format:
//   magic "TDMP", u8 version=1, u8 dtype (0=f32, 1=f64), u8 rank,
//   little-endian u64 dims[rank], then row-major scalars (f32 or f64, LE).
void write_tdump(std::ostream& os, const Tensor& t);
Tensor read_tdump(std::istream& is);
void save_tdump(const std::string& path, const Tensor& t);
Tensor load_tdump(const std::string& path);

// Checkpoint: header "FBCP", u8 version=1, u64 record count, then
// length-prefixed (u64 name length, name bytes, tdump blob) records in
// sorted name order. Loading matches records to store entries by name and
// requires exact shape and dtype agreement.
void save_checkpoint(const std::string& path, const ParamStore& store);
void load_checkpoint(const std::string& path, ParamStore& store);

}  // namespace faxbev
