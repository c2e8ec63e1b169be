#include <gtest/gtest.h>

#include "finecount/error.hpp"
#include "finecount/mock_shapes.hpp"
#include "finecount/pipe_generator.hpp"

using namespace finecount;

namespace {

const std::string kPrompt = "A photorealistic image of a few red disk. close-up, golden hour";

GeneratorCapabilities service_caps() {
  mock::MockShapesGenerator gen;
  auto caps = gen.capabilities();
  caps.id = "pipe";
  return caps;
}

}  // namespace

TEST(PipeGenerator, FrameRoundTrip) {
  mock::MockShapesGenerator gen;
  const Generation g = gen.generate(kPrompt, 11);
  const Generation back = decode_generation(encode_generation(g));
  EXPECT_EQ(back.image, g.image);
  EXPECT_EQ(back.attention.values, g.attention.values);
  EXPECT_EQ(back.attention.block_ids, g.attention.block_ids);
  EXPECT_EQ(back.attention.grid, g.attention.grid);
  EXPECT_EQ(back.attention.heads, g.attention.heads);
  EXPECT_EQ(back.attention.text_tokens, g.attention.text_tokens);
  ASSERT_EQ(back.words.size(), g.words.size());
  for (std::size_t i = 0; i < g.words.size(); ++i) {
    EXPECT_EQ(back.words[i].word, g.words[i].word);
    EXPECT_EQ(back.words[i].tokens, g.words[i].tokens);
  }
}

TEST(PipeGenerator, RejectsCorruptFrames) {
  mock::MockShapesGenerator gen;
  auto frame = encode_generation(gen.generate(kPrompt, 1));
  auto bad_magic = frame;
  bad_magic[0] = 'X';
  EXPECT_THROW(decode_generation(bad_magic), Error);
  auto truncated = frame;
  truncated.resize(frame.size() - 3);
  EXPECT_THROW(decode_generation(truncated), Error);
  auto padded = frame;
  padded.push_back(0);
  EXPECT_THROW(decode_generation(padded), Error);
  EXPECT_THROW(decode_generation({}), Error);
}

TEST(PipeGenerator, RequestIsOneJsonLine) {
  const std::string req = encode_generation_request("say \"hi\"\n", 42);
  EXPECT_EQ(req.back(), '\n');
  EXPECT_EQ(std::count(req.begin(), req.end(), '\n'), 1);
  const auto j = nlohmann::json::parse(req);
  EXPECT_EQ(j.at("prompt"), "say \"hi\"\n");
  EXPECT_EQ(j.at("seed"), 42);
}

TEST(PipeGenerator, ServiceMatchesInProcessBackend) {
  PipeGenerator pipe({FINECOUNT_SERVICE_PATH}, service_caps());
  mock::MockShapesGenerator gen;
  const Generation remote = pipe.generate(kPrompt, 5);
  const Generation local = gen.generate(kPrompt, 5);
  EXPECT_EQ(remote.image, local.image);
  EXPECT_EQ(remote.attention.values, local.attention.values);
}

TEST(PipeGenerator, NonZeroExitIsBackendError) {
  PipeGenerator pipe({FINECOUNT_SERVICE_PATH, "--fail-on", "red disk"}, service_caps());
  try {
    pipe.generate(kPrompt, 5);
    FAIL() << "expected failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kBackend);
  }
  EXPECT_NO_THROW(pipe.generate("A photorealistic image of many orange disk. close-up, backlit", 5));
}

TEST(PipeGenerator, MissingExecutableIsBackendError) {
  PipeGenerator pipe({"/nonexistent/finecount-service"}, service_caps());
  try {
    pipe.generate(kPrompt, 5);
    FAIL() << "expected failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kBackend);
  }
}

TEST(PipeGenerator, ShapeMismatchIsCapabilityError) {
  auto caps = service_caps();
  caps.image_height = caps.image_width = 32;
  PipeGenerator pipe({FINECOUNT_SERVICE_PATH}, caps);
  try {
    pipe.generate(kPrompt, 5);
    FAIL() << "expected failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCapability);
  }
}
