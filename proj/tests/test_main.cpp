#include <gtest/gtest.h>

#include "envrobust/log.hpp"

int main(int argc, char** argv) {
  ::testing::InitGoogleTest(&argc, argv);
  envrobust::configure_logging();
  return RUN_ALL_TESTS();
}
