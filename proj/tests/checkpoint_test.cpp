#include <cstring>
#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>

#include "dpdf/checkpoint.hpp"
#include "dpdf/disc.hpp"
#include "dpdf/flow.hpp"
#include "dpdf/gmm.hpp"

using namespace dpdf;

namespace {

EncoderConfig tiny_encoder() {
  EncoderConfig e;
  e.depth = 2;
  e.width = 5;
  return e;
}

std::unique_ptr<DensityModel> make(ModelFamily f, std::uint64_t seed) {
  switch (f) {
    case ModelFamily::Gmm: return std::make_unique<GmmModel>(GmmConfig{2, 3, std::nullopt, tiny_encoder()}, seed);
    case ModelFamily::Disc: {
      DiscConfig d;
      d.binning = {{-2.0, -2.0}, {2.0, 2.0}, {8, 4}};
      d.encoder = tiny_encoder();
      return std::make_unique<DiscModel>(d, seed);
    }
    case ModelFamily::Flow: {
      FlowConfig c;
      c.K = 2;
      c.depth = 2;
      c.hidden = 6;
      c.encoder = tiny_encoder();
      return std::make_unique<FlowModel>(c, seed);
    }
  }
  return nullptr;
}

std::string serialize(const DensityModel& m, std::uint64_t hash = 42) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, m.parameters(), m.family(), hash);
  return os.str();
}

void expect_same(const ParameterStore& a, const ParameterStore& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto va = a.entries()[i].tensor.to_vector(), vb = b.entries()[i].tensor.to_vector();
    ASSERT_EQ(va.size(), vb.size());
    EXPECT_EQ(std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)), 0) << a.entries()[i].name;
  }
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExactForEveryFamily) {
  for (auto f : {ModelFamily::Gmm, ModelFamily::Disc, ModelFamily::Flow}) {
    auto src = make(f, 1), dst = make(f, 2);
    std::istringstream is(serialize(*src), std::ios::binary);
    read_checkpoint(is, dst->parameters(), f, 42);
    expect_same(src->parameters(), dst->parameters());
    EXPECT_EQ(serialize(*src), serialize(*dst));
  }
}

TEST(Checkpoint, LayoutStartsWithMagicAndLittleEndianHeader) {
  auto m = make(ModelFamily::Gmm, 1);
  const std::string bytes = serialize(*m, 0x0102030405060708ULL);
  ASSERT_GT(bytes.size(), 21u);
  EXPECT_EQ(bytes.substr(0, 5), "DPDF1");
  EXPECT_EQ(static_cast<unsigned char>(bytes[5]), static_cast<unsigned>(ModelFamily::Gmm));
  EXPECT_EQ(static_cast<unsigned char>(bytes[9]), 0x08);
  EXPECT_EQ(static_cast<unsigned char>(bytes[16]), 0x01);
  EXPECT_EQ(static_cast<unsigned char>(bytes[17]), m->parameters().size());
}

TEST(Checkpoint, FileSaveAndLoad) {
  const auto path = (std::filesystem::temp_directory_path() / "dpdf_ckpt_test.dpdf").string();
  auto src = make(ModelFamily::Flow, 3), dst = make(ModelFamily::Flow, 4);
  save_checkpoint(path, src->parameters(), ModelFamily::Flow, 7);
  load_checkpoint(path, dst->parameters(), ModelFamily::Flow, 7);
  expect_same(src->parameters(), dst->parameters());
  EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path, dst->parameters(), ModelFamily::Flow, 7), std::runtime_error);
}

TEST(Checkpoint, EveryTruncationIsAParseErrorAndLeavesTheStoreAlone) {
  auto src = make(ModelFamily::Gmm, 1);
  const std::string bytes = serialize(*src);
  for (std::size_t len = 0; len < bytes.size(); len += 7) {
    auto dst = make(ModelFamily::Gmm, 2);
    const auto before = snapshot(dst->parameters());
    std::istringstream is(bytes.substr(0, len), std::ios::binary);
    EXPECT_THROW(read_checkpoint(is, dst->parameters(), ModelFamily::Gmm, 42), ParseError) << "length " << len;
    EXPECT_EQ(snapshot(dst->parameters()), before);
  }
}

TEST(Checkpoint, RefusesForeignHashAndFamily) {
  auto src = make(ModelFamily::Gmm, 1), dst = make(ModelFamily::Gmm, 2);
  const auto before = snapshot(dst->parameters());
  {
    std::istringstream is(serialize(*src, 42), std::ios::binary);
    EXPECT_THROW(read_checkpoint(is, dst->parameters(), ModelFamily::Gmm, 43), ContractViolation);
  }
  {
    std::istringstream is(serialize(*src, 42), std::ios::binary);
    EXPECT_THROW(read_checkpoint(is, dst->parameters(), ModelFamily::Flow, 42), ContractViolation);
  }
  EXPECT_EQ(snapshot(dst->parameters()), before);
}

TEST(Checkpoint, StructuralErrors) {
  auto gmm = make(ModelFamily::Gmm, 1);
  std::string bytes = serialize(*gmm);
  {
    std::string bad = bytes;
    bad[4] = '2';
    std::istringstream is(bad, std::ios::binary);
    EXPECT_THROW(read_checkpoint(is, gmm->parameters(), ModelFamily::Gmm, 42), ParseError);
  }
  {
    std::istringstream is(bytes + "x", std::ios::binary);
    EXPECT_THROW(read_checkpoint(is, gmm->parameters(), ModelFamily::Gmm, 42), ParseError);
  }
  {
    // Same family and hash but a different layout.
    auto other = std::make_unique<GmmModel>(GmmConfig{2, 4, std::nullopt, tiny_encoder()}, 1);
    std::istringstream is(serialize(*other), std::ios::binary);
    EXPECT_THROW(read_checkpoint(is, gmm->parameters(), ModelFamily::Gmm, 42), ParseError);
  }
}

TEST(Checkpoint, SnapshotRestore) {
  auto m = make(ModelFamily::Flow, 1);
  const auto snap = snapshot(m->parameters());
  const auto& e = m->parameters().entries().front();
  std::vector<double> junk(e.tensor.numel(), 9.0);
  m->parameters().assign(e.name, e.tensor.shape(), junk);
  EXPECT_NE(snapshot(m->parameters()), snap);
  restore(m->parameters(), snap);
  EXPECT_EQ(snapshot(m->parameters()), snap);
}
