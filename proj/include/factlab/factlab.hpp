#pragma once

#define FACTLAB_VERSION "0.1.0"

#include "factlab/aggregator.hpp"
#include "factlab/annotator.hpp"
#include "factlab/corpus.hpp"
#include "factlab/gateway.hpp"
#include "factlab/judge.hpp"
#include "factlab/label.hpp"
#include "factlab/metrics.hpp"
#include "factlab/mock_llm.hpp"
#include "factlab/prompt.hpp"
#include "factlab/review.hpp"
#include "factlab/review_server.hpp"
#include "factlab/util.hpp"
