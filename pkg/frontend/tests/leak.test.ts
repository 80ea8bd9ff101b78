import { describe, expect, it } from "vitest"

import { ArrayView, runKernel } from "../src"

declare const global: { gc?: () => void }

function heapAfterGc(): number {
  global.gc!()
  global.gc!()
  return process.memoryUsage().heapUsed
}

describe("repeated-call memory stability", () => {
  // run with --expose-gc (the package test script sets NODE_OPTIONS)
  it("does not grow the heap over 1e4 kernel calls", () => {
    expect(typeof global.gc, "run tests with NODE_OPTIONS=--expose-gc").toBe("function")

    const dims: [number, number, number] = [8, 8, 8]
    const n = 8 * 8 * 8
    const labels = new Int32Array(n)
    for (let i = 0; i < n; i++) labels[i] = i % 7 === 0 ? 1 : 0
    const p = new Float64Array(n)
    for (let i = 0; i < n; i++) p[i] = (i % 97) / 96
    const labelView = new ArrayView(labels, dims)
    const probView = new ArrayView(p, dims)

    const iterations = 10_000
    // warm up so lazily allocated internals don't count as growth
    for (let i = 0; i < 100; i++) {
      runKernel("sdm", { labels: labelView }, { spacing: [1, 1, 1] })
      runKernel("ambiguity", { p_fg: probView })
    }
    const before = heapAfterGc()
    for (let i = 0; i < iterations; i++) {
      runKernel("sdm", { labels: labelView }, { spacing: [1, 1, 1] })
      runKernel("ambiguity", { p_fg: probView })
    }
    const growth = heapAfterGc() - before
    // fixed-size inputs: steady-state heap must not trend upward
    expect(growth).toBeLessThan(8 * 1024 * 1024)
  })
})
