#ifndef MITL_IMAGE_IO_HPP
#define MITL_IMAGE_IO_HPP

#include <filesystem>

#include "mitl/tensor.hpp"

namespace mitl {

// Patches travel as binary PPM (P6, maxval 255); 8-bit channel values map
// linearly to [0,1]. Class maps travel as binary PGM (P5) whose maxval is the
// largest class id, so pixels hold class ids directly.

void write_ppm(const Tensor& rgb, const std::filesystem::path& path); // [1,3,H,W] in [0,1]
Tensor read_ppm(const std::filesystem::path& path);

void write_pgm(const Tensor& map, int maxval, const std::filesystem::path& path); // [1,1,H,W] ids
Tensor read_pgm(const std::filesystem::path& path);

} // namespace mitl

#endif
