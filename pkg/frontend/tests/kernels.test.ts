import { readdirSync, readFileSync, existsSync } from "node:fs"
import { join, dirname } from "node:path"
import { fileURLToPath } from "node:url"
import { describe, expect, it } from "vitest"

import { ArrayView, DTypeError, ShapeError, readTensor, runKernel, softDice } from "../src"

const FIXTURES = join(dirname(fileURLToPath(import.meta.url)), "..", "fixtures")

interface Request {
  op: string
  inputs: Record<string, string>
  scalars: Record<string, number | number[] | string>
  outputs: Record<string, string>
}

function maxAbsDiff(a: ArrayView, b: ArrayView): number {
  expect(a.shape).toEqual(b.shape)
  let worst = 0
  for (let i = 0; i < a.data.length; i++)
    worst = Math.max(worst, Math.abs(a.data[i] - b.data[i]))
  return worst
}

describe("CLI fixture equivalence", () => {
  const cases = readdirSync(FIXTURES).filter((d) =>
    existsSync(join(FIXTURES, d, "request.json")),
  )
  it("fixture corpus is present", () => {
    expect(cases.length).toBeGreaterThanOrEqual(10)
  })

  for (const name of cases) {
    it(`matches the core on '${name}'`, () => {
      const dir = join(FIXTURES, name)
      const req = JSON.parse(readFileSync(join(dir, "request.json"), "utf8")) as Request
      const inputs = Object.fromEntries(
        Object.entries(req.inputs).map(([key, rel]) => [key, readTensor(join(dir, rel))]),
      )
      const result = runKernel(req.op, inputs, req.scalars)
      for (const [out, rel] of Object.entries(req.outputs)) {
        const expected = readTensor(join(dir, rel))
        const diff = maxAbsDiff(result.arrays[out], expected)
        // the distance transform is exact arithmetic; everything else only
        // differs by floating-point summation order
        expect(diff).toBeLessThanOrEqual(req.op === "sdm" ? 0 : 1e-6)
      }
      const expectedScalars = JSON.parse(
        readFileSync(join(dir, "expected.json"), "utf8"),
      ).scalars as Record<string, number>
      for (const [key, value] of Object.entries(expectedScalars))
        expect(Math.abs(result.scalars[key] - value)).toBeLessThanOrEqual(
          1e-6 * Math.max(1, Math.abs(value)),
        )
    })
  }
})

describe("input validation", () => {
  const floatVol = new ArrayView(new Float32Array(8), [2, 2, 2])

  it("rejects float labels with a typed exception naming the parameter", () => {
    expect(() => runKernel("sdm", { labels: floatVol })).toThrowError(DTypeError)
    expect(() => runKernel("sdm", { labels: floatVol })).toThrowError(/labels/)
  })

  it("rejects mismatched mask shape", () => {
    const f = new ArrayView(new Float64Array(16), [2, 2, 2, 2])
    const mask = new ArrayView(new Uint8Array(4), [1, 2, 2])
    expect(() => runKernel("gated_fusion", { f_in: f, f_ref: f, mask }, { alpha: 1 }))
      .toThrowError(ShapeError)
  })

  it("rejects non-3D ambiguity input", () => {
    const flat = new ArrayView(new Float64Array(4), [4])
    expect(() => runKernel("ambiguity", { p_fg: flat })).toThrowError(ShapeError)
  })

  it("rejects an unknown op", () => {
    expect(() => runKernel("nope", {})).toThrowError(/unknown kernel op/)
  })
})

describe("soft dice gradient vs. central finite differences", () => {
  it("agrees within 1e-4 relative error", () => {
    // deterministic LCG so the test is self-contained
    let state = 12345
    const rand = () => {
      state = (state * 1103515245 + 12345) % 2147483648
      return state / 2147483648
    }
    const c = 4
    const vol = 3 * 4 * 5
    const p = new Float64Array(c * vol)
    for (let i = 0; i < p.length; i++) p[i] = 0.05 + 0.9 * rand()
    const y = new Int32Array(vol)
    for (let i = 0; i < vol; i++) y[i] = Math.floor(rand() * c)
    const pred = new ArrayView(p, [c, 3, 4, 5])
    const gt = new ArrayView(y, [3, 4, 5])
    const { grad } = softDice(pred, gt, 1e-5)
    const h = 1e-4
    for (let probe = 0; probe < 25; probe++) {
      const idx = Math.floor(rand() * p.length)
      const keep = p[idx]
      p[idx] = keep + h
      const up = softDice(new ArrayView(p, pred.shape), gt, 1e-5).loss
      p[idx] = keep - h
      const down = softDice(new ArrayView(p, pred.shape), gt, 1e-5).loss
      p[idx] = keep
      const fd = (up - down) / (2 * h)
      const scale = Math.max(Math.abs(fd), Math.abs(grad.data[idx]), 1e-8)
      expect(Math.abs(fd - grad.data[idx]) / scale).toBeLessThan(1e-4)
    }
  })
})
