#pragma once

#include "cefgl/error.hpp"
#include "cefgl/rng.hpp"
#include "cefgl/linalg.hpp"
#include "cefgl/compress.hpp"
#include "cefgl/graphdata.hpp"
#include "cefgl/gnn.hpp"
#include "cefgl/fedcore.hpp"
#include "cefgl/harness.hpp"
