#include "sdsgan/io.hpp"

#include <boost/crc.hpp>
#include <png.h>

#include <array>
#include <fstream>
#include <iterator>

namespace sdsgan::io {

namespace {
constexpr std::array<char, 4> kMagic{'S', 'G', 'C', 'K'};
}

std::uint32_t crc32(const std::uint8_t* data, std::size_t size) {
  boost::crc_32_type crc;
  crc.process_bytes(data, size);
  return crc.checksum();
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void write_container(const std::filesystem::path& path, std::string_view kind, std::uint32_t version,
                     const std::vector<std::uint8_t>& payload) {
  Writer w;
  for (char c : kMagic) w.put<char>(c);
  w.put<std::uint32_t>(version);
  w.put_string(kind);
  w.put<std::uint64_t>(payload.size());
  std::vector<std::uint8_t> bytes = w.bytes();
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  const std::uint32_t crc = crc32(payload.data(), payload.size());
  const auto* p = reinterpret_cast<const std::uint8_t*>(&crc);
  bytes.insert(bytes.end(), p, p + sizeof crc);
  write_file_atomic(path, bytes);
}

std::vector<std::uint8_t> read_container(const std::filesystem::path& path, std::string_view kind, std::uint32_t version) {
  Reader r(read_file(path));
  for (char c : kMagic)
    if (r.get<char>() != c) throw CorruptionError(path.string() + ": not a checkpoint file (bad magic)");
  const auto found_version = r.get<std::uint32_t>();
  const std::string found_kind = r.get_string();
  if (found_kind != kind)
    throw CorruptionError(path.string() + ": checkpoint holds '" + found_kind + "', expected '" + std::string(kind) + "'");
  if (found_version != version)
    throw VersionError(path.string() + ": checkpoint version " + std::to_string(found_version) +
                       " does not match supported version " + std::to_string(version));
  const auto size = r.get<std::uint64_t>();
  if (size > r.remaining() || r.remaining() - size != sizeof(std::uint32_t))
    throw CorruptionError(path.string() + ": checkpoint truncated or padded");
  std::vector<std::uint8_t> payload(size);
  for (auto& b : payload) b = r.get<std::uint8_t>();
  const auto stored = r.get<std::uint32_t>();
  if (stored != crc32(payload.data(), payload.size()))
    throw CorruptionError(path.string() + ": content hash mismatch");
  return payload;
}

namespace {

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

struct PngSource {
  const std::vector<std::uint8_t>* bytes;
  std::size_t pos;
};

void png_read_from_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* src = static_cast<PngSource*>(png_get_io_ptr(png));
  if (src->pos + length > src->bytes->size()) png_error(png, "truncated png stream");
  std::memcpy(data, src->bytes->data() + src->pos, length);
  src->pos += length;
}

void png_error_throw(png_structp, png_const_charp message) { throw ProtocolError(std::string("png: ") + message); }
void png_warning_ignore(png_structp, png_const_charp) {}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image<float>& image) {
  if (image.channels() != 3) throw ShapeError("encode_png expects an RGB image");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> row(std::size_t(image.width) * 3);
  try {
    png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
    png_set_IHDR(png, info, image.width, image.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y) {
      for (int x = 0; x < image.width; ++x)
        for (int c = 0; c < 3; ++c) {
          const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
          row[std::size_t(x) * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
        }
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

Image<float> decode_png(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw ProtocolError("payload is not a PNG image");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
  png_infop info = png_create_info_struct(png);
  PngSource src{&bytes, 0};
  Image<float> image;
  try {
    png_set_read_fn(png, &src, png_read_from_vector);
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    if (png_get_channels(png, info) != 3) throw ProtocolError("png: unsupported channel layout");
    image = Image<float>(3, h, w);
    std::vector<std::uint8_t> row(std::size_t(w) * 3);
    for (int y = 0; y < h; ++y) {
      png_read_row(png, row.data(), nullptr);
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) image.at(c, y, x) = row[std::size_t(x) * 3 + c] / 255.0f;
    }
    png_read_end(png, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

void write_png(const std::filesystem::path& path, const Image<float>& image) { write_file_atomic(path, encode_png(image)); }

Image<float> read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

Image<float> grey_to_rgb(const VectorX<float>& values, int height, int width) {
  if (values.size() != Index(height) * width) throw ShapeError("grey_to_rgb: size mismatch");
  Image<float> out(3, height, width);
  for (int c = 0; c < 3; ++c) out.planes.row(c) = values.transpose();
  return out;
}

Image<float> hstack(const std::vector<Image<float>>& images) {
  if (images.empty()) return {};
  const int h = images.front().height, w = images.front().width;
  Image<float> out(3, h, w * static_cast<int>(images.size()));
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].height != h || images[i].width != w) throw ShapeError("hstack: images differ in size");
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(c, y, static_cast<int>(i) * w + x) = images[i].at(c, y, x);
  }
  return out;
}

namespace {
constexpr char kAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += kAlphabet[(v >> 6) & 63];
    out += kAlphabet[v & 63];
  }
  if (i < bytes.size()) {
    std::uint32_t v = bytes[i] << 16;
    if (i + 1 < bytes.size()) v |= bytes[i + 1] << 8;
    out += kAlphabet[(v >> 18) & 63];
    out += kAlphabet[(v >> 12) & 63];
    out += i + 1 < bytes.size() ? kAlphabet[(v >> 6) & 63] : '=';
    out += '=';
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  if (text.size() % 4 != 0) throw ProtocolError("base64: length is not a multiple of 4");
  std::vector<std::uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  for (std::size_t i = 0; i < text.size(); i += 4) {
    int v[4];
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      const char c = text[i + k];
      if (c == '=' && i + 4 == text.size() && k >= 2) {
        v[k] = 0;
        ++pad;
        continue;
      }
      if (pad) throw ProtocolError("base64: data after padding");
      v[k] = value(c);
      if (v[k] < 0) throw ProtocolError("base64: invalid character");
    }
    const std::uint32_t bits = (v[0] << 18) | (v[1] << 12) | (v[2] << 6) | v[3];
    out.push_back(static_cast<std::uint8_t>(bits >> 16));
    if (pad < 2) out.push_back(static_cast<std::uint8_t>((bits >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<std::uint8_t>(bits & 0xff));
  }
  return out;
}

}  // namespace sdsgan::io
