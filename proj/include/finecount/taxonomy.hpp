#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace finecount {

enum class NegativeSource { kLlmGenerated, kFineVsBroad, kStatic, kNone };

std::string_view to_string(NegativeSource source);
NegativeSource negative_source_from_string(std::string_view text);

// A fine-grained target category together with the categories used as hard
// negatives while tuning its concept embedding.
struct CategorySpec {
  std::string name;
  std::optional<std::string> parent;
  std::vector<std::string> negatives;
  NegativeSource negative_source = NegativeSource::kNone;

  // Throws Error(kInvalidSpec) when an invariant is broken.
  void validate() const;

  friend bool operator==(const CategorySpec&, const CategorySpec&) = default;
};

void to_json(nlohmann::json& j, const CategorySpec& spec);
void from_json(const nlohmann::json& j, CategorySpec& spec);

struct PromptBundle {
  std::vector<std::string> positive_prompts;
  std::map<std::string, std::vector<std::string>> negative_prompts;

  friend bool operator==(const PromptBundle&, const PromptBundle&) = default;
};

inline constexpr std::array<std::string_view, 4> kCountSlots = {
    "many", "hundreds of", "a few", "exactly two"};
inline constexpr std::array<std::string_view, 5> kViewSlots = {
    "top-down view", "high angle", "viewed from a distance", "close-up",
    "macro shot"};
inline constexpr std::array<std::string_view, 6> kLightSlots = {
    "backlit", "soft lighting", "golden hour", "overcast", "sunlight",
    "dimly lit"};
inline constexpr std::size_t kSlotCombinations =
    kCountSlots.size() * kViewSlots.size() * kLightSlots.size();

// "A photorealistic image of {COUNT} {CATEGORY}. {VIEW}, {LIGHT}"
std::string fill_image_prompt(std::string_view count, std::string_view category,
                              std::string_view view, std::string_view light);

// Generates n_per_category prompts for the target and for every negative.
// Each category walks a seeded permutation of all 120 slot combinations,
// repeating the same permutation once it is exhausted, so any 120
// consecutive prompts of one category use each combination exactly once.
PromptBundle expand_prompts(const CategorySpec& spec, int n_per_category,
                            std::uint64_t seed);

// Lower-cases and collapses runs of whitespace; used for all name comparisons.
std::string normalize_category_key(std::string_view name);

// Endpoint that proposes related categories for a target. Implementations
// throw Error(kExternalService) on transport failure.
class NegativeSuggester {
 public:
  virtual ~NegativeSuggester() = default;
  // Takes the filled request text, returns the raw free-text response.
  virtual std::string suggest(const std::string& request) = 0;
};

// Fixed response, optionally keyed by the category named in the request.
class StaticSuggester : public NegativeSuggester {
 public:
  explicit StaticSuggester(std::vector<std::string> response);
  explicit StaticSuggester(std::map<std::string, std::vector<std::string>> by_category);

  std::string suggest(const std::string& request) override;
  const std::vector<std::string>& requests() const { return requests_; }

 private:
  std::vector<std::string> fallback_;
  std::map<std::string, std::vector<std::string>> by_category_;
  std::vector<std::string> requests_;
};

// POSTs the request as text/plain to http://host:port/path and returns the
// response body. An optional bearer token is sent as Authorization.
class HttpSuggester : public NegativeSuggester {
 public:
  HttpSuggester(std::string url, std::optional<std::string> bearer_token,
                int timeout_seconds = 30);

  // Reads FINECOUNT_SUGGESTER_URL and FINECOUNT_SUGGESTER_TOKEN.
  static HttpSuggester from_environment();

  std::string suggest(const std::string& request) override;

 private:
  std::string url_;
  std::optional<std::string> token_;
  int timeout_seconds_;
};

std::string negative_request_text(int count, std::string_view category);

// Splits a free-text list on newlines and commas; strips bullets ("-", "*",
// "1.", "2)"), surrounding quotes and trailing periods.
std::vector<std::string> parse_suggestion_list(std::string_view text);

// Resolves spec.negatives according to spec.negative_source. llm is only
// consulted for kLlmGenerated.
CategorySpec source_negatives(CategorySpec spec, int k, NegativeSuggester* llm);

// Lower-case, spaces to '_', other non-alphanumerics dropped.
std::string category_slug(std::string_view name);

}  // namespace finecount
