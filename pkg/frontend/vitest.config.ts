import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "node",
    include: ["tests/**/*.test.ts"],
    // the round-trip suite boots a real annotation server
    testTimeout: 60_000,
    hookTimeout: 60_000,
  },
});
