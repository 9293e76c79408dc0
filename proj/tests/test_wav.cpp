#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "capslid/error.hpp"
#include "capslid/wav.hpp"

using namespace capslid;

namespace {

// Hand-built RIFF container, independent of encode_wav.
std::vector<std::uint8_t> make_wav(const std::vector<std::int16_t>& samples,
                                   std::uint32_t rate = 16000,
                                   std::uint16_t channels = 1) {
  std::vector<std::uint8_t> b;
  auto u16 = [&](std::uint16_t v) {
    b.push_back(v & 0xFF);
    b.push_back(v >> 8);
  };
  auto u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xFF);
  };
  auto tag = [&](const char* t) { b.insert(b.end(), t, t + 4); };
  const std::uint32_t data_size =
      static_cast<std::uint32_t>(samples.size() * 2);
  tag("RIFF");
  u32(36 + data_size);
  tag("WAVE");
  tag("fmt ");
  u32(16);
  u16(1);  // PCM
  u16(channels);
  u32(rate);
  u32(rate * channels * 2);
  u16(channels * 2);
  u16(16);
  tag("data");
  u32(data_size);
  for (std::int16_t s : samples) u16(static_cast<std::uint16_t>(s));
  return b;
}

}  // namespace

TEST_SUITE_BEGIN("wav");

TEST_CASE("int16 samples scale by 1/32768") {
  auto signal = decode_wav(make_wav({0, 16384, -16384}));
  REQUIRE(signal.samples.size() == 3);
  CHECK(signal.samples[0] == 0.0);
  CHECK(signal.samples[1] == 0.5);
  CHECK(signal.samples[2] == -0.5);
  CHECK(signal.sample_rate_hz == 16000);
}

TEST_CASE("two-channel file is rejected") {
  auto bytes = make_wav({0, 0, 0, 0}, 16000, 2);
  CHECK_THROWS_AS_MESSAGE(decode_wav(bytes), Error, "2-channel");
  try {
    decode_wav(bytes);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::UnsupportedFormat);
  }
}

TEST_CASE("truncated header is malformed") {
  auto bytes = make_wav({1, 2, 3});
  bytes.resize(10);
  try {
    decode_wav(bytes);
    FAIL("expected MalformedWav");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::MalformedWav);
  }
}

TEST_CASE("float-format wav is unsupported") {
  auto bytes = make_wav({1, 2, 3});
  bytes[20] = 3;  // fmt tag -> IEEE float
  try {
    decode_wav(bytes);
    FAIL("expected UnsupportedFormat");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::UnsupportedFormat);
  }
}

TEST_CASE("unknown chunks before data are skipped") {
  auto bytes = make_wav({100, -100});
  // splice a LIST chunk between fmt and data
  std::vector<std::uint8_t> extra = {'L', 'I', 'S', 'T', 4, 0, 0, 0, 'x', 'y', 'z', 'w'};
  bytes.insert(bytes.begin() + 36, extra.begin(), extra.end());
  auto signal = decode_wav(bytes);
  CHECK(signal.samples.size() == 2);
}

TEST_CASE("encode/decode round trip stays within one quantization step") {
  std::mt19937_64 rng(7);
  PcmSignal signal;
  signal.sample_rate_hz = 16000;
  for (int i = 0; i < 4096; ++i)
    signal.samples.push_back(
        0.95 * (2.0 * (static_cast<double>(rng() >> 11) * 0x1.0p-53) - 1.0));
  auto decoded = decode_wav(encode_wav(signal));
  REQUIRE(decoded.samples.size() == signal.samples.size());
  double max_err = 0.0;
  for (std::size_t i = 0; i < decoded.samples.size(); ++i)
    max_err = std::max(max_err,
                       std::abs(decoded.samples[i] - signal.samples[i]));
  CHECK(max_err <= 1.0 / 32768.0);
}

TEST_CASE("file round trip") {
  auto dir = std::filesystem::temp_directory_path() / "capslid_wav_test";
  std::filesystem::create_directories(dir);
  PcmSignal signal;
  signal.sample_rate_hz = 16000;
  for (int i = 0; i < 256; ++i) signal.samples.push_back(i / 512.0);
  write_wav_file(dir / "x.wav", signal);
  auto loaded = read_wav_file(dir / "x.wav");
  CHECK(loaded.sample_rate_hz == 16000);
  CHECK(loaded.samples.size() == 256);
  std::filesystem::remove_all(dir);
}

TEST_SUITE_END();
