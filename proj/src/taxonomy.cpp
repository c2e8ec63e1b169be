#include "finecount/taxonomy.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <numeric>
#include <random>
#include <set>

#include "finecount/error.hpp"
#include "finecount/hash.hpp"

namespace finecount {

namespace {

constexpr std::string_view kRequestTemplate =
    "Provide a diverse list of exactly {COUNT} object categories that are "
    "semantically similar to {CATEGORY} and are very likely to appear in the "
    "same everyday environment. The items should be familiar categories that "
    "are either visually similar or from a closely related taxonomy. Only "
    "provide the list and nothing else.";

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
  for (std::size_t pos = s.find(from); pos != std::string::npos;
       pos = s.find(from, pos + to.size())) {
    s.replace(pos, from.size(), to);
  }
}

std::vector<std::string> prompts_for(std::string_view category, int n,
                                     std::uint64_t seed) {
  std::vector<std::size_t> order(kSlotCombinations);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, normalize_category_key(category)));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::string> prompts;
  prompts.reserve(n);
  for (int i = 0; i < n; ++i) {
    const std::size_t combo = order[static_cast<std::size_t>(i) % kSlotCombinations];
    const std::size_t light = combo % kLightSlots.size();
    const std::size_t view = (combo / kLightSlots.size()) % kViewSlots.size();
    const std::size_t count = combo / (kLightSlots.size() * kViewSlots.size());
    prompts.push_back(fill_image_prompt(kCountSlots[count], category,
                                        kViewSlots[view], kLightSlots[light]));
  }
  return prompts;
}

std::string category_in_request(const std::string& request) {
  constexpr std::string_view kBefore = "semantically similar to ";
  constexpr std::string_view kAfter = " and are very likely";
  const auto b = request.find(kBefore);
  if (b == std::string::npos) return {};
  const auto start = b + kBefore.size();
  const auto e = request.find(kAfter, start);
  if (e == std::string::npos) return {};
  return request.substr(start, e - start);
}

std::string join_lines(const std::vector<std::string>& items) {
  std::string out;
  for (const auto& item : items) {
    out += item;
    out += '\n';
  }
  return out;
}

}  // namespace

std::string_view to_string(NegativeSource source) {
  switch (source) {
    case NegativeSource::kLlmGenerated: return "llm_generated";
    case NegativeSource::kFineVsBroad: return "fine_vs_broad";
    case NegativeSource::kStatic: return "static";
    case NegativeSource::kNone: return "none";
  }
  return "none";
}

NegativeSource negative_source_from_string(std::string_view text) {
  const std::string key = normalize_category_key(text);
  for (auto s : {NegativeSource::kLlmGenerated, NegativeSource::kFineVsBroad,
                 NegativeSource::kStatic, NegativeSource::kNone}) {
    if (key == to_string(s)) return s;
  }
  throw Error(ErrorKind::kInvalidSpec, "unknown negative source '" + std::string(text) + "'");
}

std::string normalize_category_key(std::string_view name) {
  std::string out;
  bool pending_space = false;
  for (char ch : name) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += ' ';
    pending_space = false;
    out += static_cast<char>(std::tolower(c));
  }
  return out;
}

std::string category_slug(std::string_view name) {
  std::string out;
  for (char ch : normalize_category_key(name)) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      out += ch;
    } else if ((ch == ' ' || ch == '-' || ch == '_') && !out.empty() && out.back() != '_') {
      out += '_';
    }
  }
  while (!out.empty() && out.back() == '_') out.pop_back();
  return out;
}

void CategorySpec::validate() const {
  const std::string key = normalize_category_key(name);
  if (key.empty()) throw Error(ErrorKind::kInvalidSpec, "category name is empty");
  std::set<std::string> seen;
  for (const auto& neg : negatives) {
    const std::string nk = normalize_category_key(neg);
    if (nk.empty()) throw Error(ErrorKind::kInvalidSpec, "empty negative for '" + name + "'");
    if (nk == key) {
      throw Error(ErrorKind::kInvalidSpec, "'" + name + "' lists itself as a negative");
    }
    if (!seen.insert(nk).second) {
      throw Error(ErrorKind::kInvalidSpec, "duplicate negative '" + neg + "'");
    }
  }
  if (negative_source == NegativeSource::kNone && !negatives.empty()) {
    throw Error(ErrorKind::kInvalidSpec, "negative source 'none' with non-empty negatives");
  }
}

void to_json(nlohmann::json& j, const CategorySpec& spec) {
  j = nlohmann::json{{"name", spec.name},
                     {"parent", spec.parent ? nlohmann::json(*spec.parent) : nlohmann::json()},
                     {"negatives", spec.negatives},
                     {"negative_source", std::string(to_string(spec.negative_source))}};
}

void from_json(const nlohmann::json& j, CategorySpec& spec) {
  spec = CategorySpec{};
  spec.name = j.at("name").get<std::string>();
  if (auto it = j.find("parent"); it != j.end() && !it->is_null()) {
    spec.parent = it->get<std::string>();
  }
  if (auto it = j.find("negatives"); it != j.end()) {
    spec.negatives = it->get<std::vector<std::string>>();
  }
  if (auto it = j.find("negative_source"); it != j.end()) {
    spec.negative_source = negative_source_from_string(it->get<std::string>());
  }
}

std::string fill_image_prompt(std::string_view count, std::string_view category,
                              std::string_view view, std::string_view light) {
  std::string out = "A photorealistic image of ";
  out.append(count).append(" ").append(category).append(". ");
  out.append(view).append(", ").append(light);
  return out;
}

PromptBundle expand_prompts(const CategorySpec& spec, int n_per_category,
                            std::uint64_t seed) {
  if (normalize_category_key(spec.name).empty()) {
    throw Error(ErrorKind::kInvalidSpec, "category name is empty");
  }
  if (n_per_category < 1) {
    throw Error(ErrorKind::kInvalidArgument, "n_per_category must be >= 1");
  }
  PromptBundle bundle;
  bundle.positive_prompts = prompts_for(spec.name, n_per_category, seed);
  for (const auto& neg : spec.negatives) {
    bundle.negative_prompts[neg] = prompts_for(neg, n_per_category, seed);
  }
  return bundle;
}

std::string negative_request_text(int count, std::string_view category) {
  std::string out(kRequestTemplate);
  replace_all(out, "{COUNT}", std::to_string(count));
  replace_all(out, "{CATEGORY}", category);
  return out;
}

std::vector<std::string> parse_suggestion_list(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    std::string item = trim(current);
    current.clear();
    // Bullets: "-", "*", "•" and enumerations like "1." or "2)".
    if (item.rfind("\xE2\x80\xA2", 0) == 0) item = trim(item.substr(3));
    while (!item.empty() && (item.front() == '-' || item.front() == '*')) {
      item = trim(item.substr(1));
    }
    std::size_t digits = 0;
    while (digits < item.size() && std::isdigit(static_cast<unsigned char>(item[digits]))) {
      ++digits;
    }
    if (digits > 0 && digits < item.size() && (item[digits] == '.' || item[digits] == ')')) {
      item = trim(item.substr(digits + 1));
    }
    while (!item.empty() && (item.front() == '"' || item.front() == '\'')) item.erase(0, 1);
    while (!item.empty() && (item.back() == '"' || item.back() == '\'' || item.back() == '.')) {
      item.pop_back();
    }
    item = trim(item);
    if (!item.empty()) out.push_back(std::move(item));
  };
  for (char ch : text) {
    if (ch == '\n' || ch == ',' || ch == ';') {
      flush();
    } else if (ch != '\r') {
      current += ch;
    }
  }
  flush();
  return out;
}

CategorySpec source_negatives(CategorySpec spec, int k, NegativeSuggester* llm) {
  if (normalize_category_key(spec.name).empty()) {
    throw Error(ErrorKind::kInvalidSpec, "category name is empty");
  }
  switch (spec.negative_source) {
    case NegativeSource::kNone:
      spec.negatives.clear();
      break;
    case NegativeSource::kStatic:
      break;
    case NegativeSource::kFineVsBroad:
      if (!spec.parent || normalize_category_key(*spec.parent).empty()) {
        throw Error(ErrorKind::kInvalidSpec,
                    "fine_vs_broad negatives need a parent for '" + spec.name + "'");
      }
      spec.negatives = {*spec.parent};
      break;
    case NegativeSource::kLlmGenerated: {
      if (k < 1) throw Error(ErrorKind::kInvalidArgument, "k must be >= 1");
      if (llm == nullptr) {
        throw Error(ErrorKind::kInvalidArgument, "llm_generated negatives need a suggester");
      }
      const std::string response = llm->suggest(negative_request_text(k, spec.name));
      const std::string target = normalize_category_key(spec.name);
      std::set<std::string> seen;
      std::vector<std::string> accepted;
      for (auto& item : parse_suggestion_list(response)) {
        const std::string key = normalize_category_key(item);
        if (key == target || !seen.insert(key).second) continue;
        accepted.push_back(std::move(item));
      }
      if (accepted.size() < static_cast<std::size_t>(k)) {
        throw InsufficientNegativesError(
            "suggester returned " + std::to_string(accepted.size()) + " usable negatives for '" +
                spec.name + "', need " + std::to_string(k),
            accepted);
      }
      accepted.resize(static_cast<std::size_t>(k));
      spec.negatives = std::move(accepted);
      break;
    }
  }
  spec.validate();
  return spec;
}

StaticSuggester::StaticSuggester(std::vector<std::string> response)
    : fallback_(std::move(response)) {}

StaticSuggester::StaticSuggester(std::map<std::string, std::vector<std::string>> by_category) {
  for (auto& [name, items] : by_category) {
    by_category_[normalize_category_key(name)] = std::move(items);
  }
}

std::string StaticSuggester::suggest(const std::string& request) {
  requests_.push_back(request);
  if (!by_category_.empty()) {
    auto it = by_category_.find(normalize_category_key(category_in_request(request)));
    if (it == by_category_.end()) return {};
    return join_lines(it->second);
  }
  return join_lines(fallback_);
}

HttpSuggester::HttpSuggester(std::string url, std::optional<std::string> bearer_token,
                             int timeout_seconds)
    : url_(std::move(url)), token_(std::move(bearer_token)), timeout_seconds_(timeout_seconds) {}

HttpSuggester HttpSuggester::from_environment() {
  const char* url = std::getenv("FINECOUNT_SUGGESTER_URL");
  if (url == nullptr || *url == '\0') {
    throw Error(ErrorKind::kExternalService, "FINECOUNT_SUGGESTER_URL is not set");
  }
  std::optional<std::string> token;
  if (const char* t = std::getenv("FINECOUNT_SUGGESTER_TOKEN"); t != nullptr && *t != '\0') {
    token = t;
  }
  return HttpSuggester(url, token);
}

std::string HttpSuggester::suggest(const std::string& request) {
  constexpr std::string_view kScheme = "http://";
  if (url_.rfind(kScheme, 0) != 0) {
    throw Error(ErrorKind::kInvalidArgument, "suggester URL must start with http://");
  }
  const auto path_start = url_.find('/', kScheme.size());
  const std::string origin = url_.substr(0, path_start);
  const std::string path = path_start == std::string::npos ? "/" : url_.substr(path_start);

  httplib::Client client(origin);
  client.set_connection_timeout(timeout_seconds_, 0);
  client.set_read_timeout(timeout_seconds_, 0);
  httplib::Headers headers;
  if (token_) headers.emplace("Authorization", "Bearer " + *token_);
  auto res = client.Post(path, headers, request, "text/plain");
  if (!res) {
    throw Error(ErrorKind::kExternalService,
                "suggester unreachable at " + origin + ": " + httplib::to_string(res.error()));
  }
  if (res->status >= 500 || res->status == 429) {
    throw Error(ErrorKind::kExternalService,
                "suggester returned HTTP " + std::to_string(res->status));
  }
  if (res->status != 200) {
    throw Error(ErrorKind::kBackend, "suggester returned HTTP " + std::to_string(res->status));
  }
  return res->body;
}

}  // namespace finecount
