#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "eventdistill/event_core.hpp"

namespace eventdistill {

using Bytes = std::vector<std::uint8_t>;

Bytes read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// FTN1 dense tensor container.
//
//   magic "FTN1" | version u32 = 1 | dtype u8 (1 = f32, 2 = f64) | ndim u8 |
//   dims u32 x ndim | row-major payload
//
// All integers and floats little-endian. Values are held as double in memory;
// the dtype only selects the on-disk precision.
// ---------------------------------------------------------------------------
enum class Dtype : std::uint8_t { f32 = 1, f64 = 2 };

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<double> values;
  Dtype dtype = Dtype::f64;

  static Tensor scalar(double value);
  std::size_t element_count() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

inline constexpr std::size_t ftn_header_size(std::size_t ndim) { return 4 + 4 + 1 + 1 + 4 * ndim; }

Bytes encode_ftn(const Tensor& tensor);
// The whole buffer must hold exactly one tensor.
Tensor decode_ftn(std::span<const std::uint8_t> bytes);
void save_tensor(const Tensor& tensor, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// EVT1 event file: magic "EVT1" | version u32 = 1 | W u32 | H u32 | count u64 |
// records { x u16, y u16, p i8, pad u8, t u64 } (14 bytes each, packed).
// ---------------------------------------------------------------------------
inline constexpr std::size_t kEvt1HeaderSize = 4 + 4 + 4 + 4 + 8;
inline constexpr std::size_t kEvt1RecordSize = 2 + 2 + 1 + 1 + 8;

Bytes encode_evt1(const EventStream& stream);
EventStream decode_evt1(std::span<const std::uint8_t> bytes);

// CSV variant: header line "x,y,p,t", one event per line. Geometry is not
// stored in the CSV, so the caller supplies it.
std::string encode_event_csv(const EventStream& stream);
EventStream decode_event_csv(const std::string& text, int width, int height);

// Dispatches on extension: ".csv" uses the text variant, anything else EVT1.
void save_events(const EventStream& stream, const std::filesystem::path& path);
EventStream load_events(const std::filesystem::path& path, int csv_width = 0,
                        int csv_height = 0);

// ---------------------------------------------------------------------------
// Binary netpbm: P6 (RGB) and P5 (gray), maxval 255.
// ---------------------------------------------------------------------------
struct NetpbmImage {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 -> P5, 3 -> P6
  std::vector<std::uint8_t> pixels;

  friend bool operator==(const NetpbmImage&, const NetpbmImage&) = default;
};

Bytes encode_netpbm(const NetpbmImage& image);
NetpbmImage decode_netpbm(std::span<const std::uint8_t> bytes);

// ---------------------------------------------------------------------------
// CKP1 checkpoint container: magic "CKP1" | version u32 = 1 | entry count u32 |
// repeated { name_len u16, name utf-8, FTN1 tensor }.
// ---------------------------------------------------------------------------
struct NamedTensor {
  std::string name;
  Tensor tensor;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

Bytes encode_ckp1(const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> decode_ckp1(std::span<const std::uint8_t> bytes);

}  // namespace eventdistill
