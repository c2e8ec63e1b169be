// Speaks the pipe generator protocol with the MockShapes renderer behind it:
// reads one JSON request line from stdin, writes one frame to stdout.

#include <cstdio>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "finecount/mock_shapes.hpp"
#include "finecount/pipe_generator.hpp"

int main(int argc, char** argv) {
  CLI::App app{"MockShapes generator service"};
  finecount::mock::MockShapesOptions options;
  std::string fail_on;
  app.add_option("--image-size", options.image_size);
  app.add_option("--patch", options.patch);
  app.add_option("--fail-on", fail_on, "Exit with status 3 when the prompt contains this text");
  CLI11_PARSE(app, argc, argv);

  std::string line;
  if (!std::getline(std::cin, line)) {
    std::cerr << "no request on stdin\n";
    return 2;
  }
  try {
    const auto request = nlohmann::json::parse(line);
    const auto prompt = request.at("prompt").get<std::string>();
    if (!fail_on.empty() && prompt.find(fail_on) != std::string::npos) {
      std::cerr << "refusing prompt: " << prompt << '\n';
      return 3;
    }
    finecount::mock::MockShapesGenerator generator(finecount::mock::ShapePalette::standard(), options);
    const auto frame =
        finecount::encode_generation(generator.generate(prompt, request.at("seed").get<std::uint64_t>()));
    std::fwrite(frame.data(), 1, frame.size(), stdout);
    std::fflush(stdout);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 1;
  }
  return 0;
}
