#include "sdsgan/field_io.hpp"

namespace sdsgan {

void write_field(io::Writer& w, const Fieldf& field) {
  field.validate();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(field.resolution));
  for (int a = 0; a < 3; ++a) w.put<float>(field.bbox.min()[a]);
  for (int a = 0; a < 3; ++a) w.put<float>(field.bbox.max()[a]);
  w.put_string(field.density_activation);
  w.put_string(field.color_activation);
  w.put_array(field.params.data(), static_cast<std::size_t>(field.nodes()));
  w.put_array(field.params.data() + field.nodes(), static_cast<std::size_t>(3 * field.nodes()));
}

Fieldf read_field(io::Reader& r) {
  Fieldf field;
  field.resolution = static_cast<int>(r.get<std::uint32_t>());
  Eigen::Vector3f lo, hi;
  for (int a = 0; a < 3; ++a) lo[a] = r.get<float>();
  for (int a = 0; a < 3; ++a) hi[a] = r.get<float>();
  field.bbox = Fieldf::Box(lo, hi);
  field.density_activation = r.get_string();
  field.color_activation = r.get_string();
  const auto density = r.get_array<float>();
  const auto color = r.get_array<float>();
  const auto n = static_cast<std::size_t>(field.resolution) * field.resolution * field.resolution;
  if (density.size() != n || color.size() != 3 * n) throw CorruptionError("field checkpoint: lattice size mismatch");
  field.params.resize(static_cast<Index>(4 * n));
  std::copy(density.begin(), density.end(), field.params.data());
  std::copy(color.begin(), color.end(), field.params.data() + n);
  try {
    field.validate();
  } catch (const ConfigError& e) {
    throw CorruptionError(std::string("field checkpoint: ") + e.what());
  }
  return field;
}

void save_field(const std::filesystem::path& path, const Fieldf& field) {
  io::Writer w;
  write_field(w, field);
  io::write_container(path, "field", kFieldFormatVersion, w.bytes());
}

Fieldf load_field(const std::filesystem::path& path) {
  io::Reader r(io::read_container(path, "field", kFieldFormatVersion));
  Fieldf field = read_field(r);
  r.expect_end();
  return field;
}

}  // namespace sdsgan
