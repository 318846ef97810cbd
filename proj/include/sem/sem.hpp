// Copyright 2026 The SEM Toolkit Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Umbrella header for the numerical core. Depends on Eigen only; the
// manifest and CLI layers (sem/manifest.hpp, sem/cli.hpp) are separate
// because they also need the vendored JSON and CLI11 headers.

#pragma once

#include "sem/binary_io.hpp"
#include "sem/common.hpp"
#include "sem/metrics.hpp"
#include "sem/probes.hpp"
#include "sem/sae.hpp"
#include "sem/scoring.hpp"
#include "sem/steering.hpp"
#include "sem/synth.hpp"
#include "sem/train.hpp"
