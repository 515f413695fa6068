#pragma once

#include "sdsgan/io.hpp"
#include "sdsgan/scene.hpp"

#include <filesystem>

namespace sdsgan {

inline constexpr std::uint32_t kFieldFormatVersion = 1;

/// Field payload: u32 resolution | 6 x f32 bbox (min xyz, max xyz) |
/// density activation | colour activation | f32 array density (N^3) |
/// f32 array colour (N^3 x 3, row-major).
void write_field(io::Writer& w, const Fieldf& field);
Fieldf read_field(io::Reader& r);

void save_field(const std::filesystem::path& path, const Fieldf& field);
Fieldf load_field(const std::filesystem::path& path);

}  // namespace sdsgan
