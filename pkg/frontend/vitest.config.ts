import { defineConfig } from "vitest/config"

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    // in-process pool so --expose-gc reaches the leak test
    pool: "threads",
    testTimeout: 120_000,
  },
})
