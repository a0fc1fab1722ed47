/*
 * Copyright 2026 The fsqa Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef FSQA_EXAMPLE_HPP
#define FSQA_EXAMPLE_HPP

#include <string>
#include <vector>

namespace fsqa {

// One question over one context with its accepted answers.
struct QAExample {
  std::string id;
  std::string question;
  std::string context;
  std::vector<std::string> answers;

  bool operator==(const QAExample&) const = default;
};

}  // namespace fsqa

#endif  // FSQA_EXAMPLE_HPP
