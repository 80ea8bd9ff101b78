/**
 * voxgeo-bindings: the voxgeo numeric kernels as typed-array functions.
 *
 * `runKernel` mirrors the core CLI's `voxgeo kernel` dispatch table — same op
 * names, same input/output tensor names, same scalar keys — so equivalence
 * against CLI-produced fixtures is a literal comparison.
 */

import { ArrayView } from "./arrays"
import * as k from "./kernels"

export * from "./arrays"
export * from "./kernels"

export const VERSION = "0.1.0"

export interface KernelResult {
  arrays: Record<string, ArrayView>
  scalars: Record<string, number>
}

type Inputs = Record<string, ArrayView>
type Scalars = Record<string, number | number[] | string>

function triple(s: Scalars, key: string, fallback: k.Triple): k.Triple {
  const v = s[key]
  return Array.isArray(v) ? [v[0], v[1], v[2]] : fallback
}

function num(s: Scalars, key: string, fallback?: number): number {
  const v = s[key]
  if (typeof v === "number") return v
  if (fallback === undefined) throw new RangeError(`missing scalar '${key}'`)
  return fallback
}

/** Run one named kernel on named tensors; the op table matches the core CLI. */
export function runKernel(op: string, inputs: Inputs, scalars: Scalars = {}): KernelResult {
  switch (op) {
    case "sdm": {
      const phi = k.signedDistanceMap(inputs.labels, triple(scalars, "spacing", [1, 1, 1]))
      return { arrays: { phi }, scalars: {} }
    }
    case "ambiguity":
      return { arrays: { field: k.ambiguityField(inputs.p_fg) }, scalars: {} }
    case "gate":
      return { arrays: { mask: k.gatingMask(inputs.field, num(scalars, "tau")) }, scalars: {} }
    case "gated_fusion": {
      const fused = k.gatedFusion(inputs.f_in, inputs.f_ref, inputs.mask, num(scalars, "alpha"))
      return { arrays: { fused }, scalars: {} }
    }
    case "gated_fusion_grad": {
      const g = k.gatedFusionGrad(
        inputs.f_in, inputs.f_ref, inputs.mask,
        num(scalars, "alpha"), inputs.upstream)
      return {
        arrays: { grad_f_in: g.gradFIn, grad_f_ref: g.gradFRef },
        scalars: { grad_alpha: g.gradAlpha },
      }
    }
    case "awp": {
      const z = k.anatomicalWeightedPooling(inputs.x, inputs.m, num(scalars, "eps", 1e-5))
      return { arrays: { z: new ArrayView(z, [z.length]) }, scalars: {} }
    }
    case "awp_grad": {
      const g = k.awpGrad(
        inputs.x, inputs.m, num(scalars, "eps", 1e-5),
        inputs.upstream.asFloat64("upstream"))
      return { arrays: { grad_x: g.gradX, grad_m: g.gradM }, scalars: {} }
    }
    case "soft_dice": {
      const r = k.softDice(inputs.pred, inputs.gt, num(scalars, "eps", 1e-5))
      return { arrays: { grad: r.grad }, scalars: { loss: r.loss } }
    }
    case "cross_entropy": {
      const r = k.crossEntropy(inputs.pred, inputs.gt)
      return { arrays: { grad: r.grad }, scalars: { loss: r.loss } }
    }
    case "surface_distances": {
      const r = k.surfaceDistances(
        inputs.pred, inputs.gt,
        num(scalars, "cls", 1), triple(scalars, "spacing", [1, 1, 1]))
      return { arrays: {}, scalars: { hd95: r.hd95, assd: r.assd } }
    }
    case "stitch": {
      const dims = triple(scalars, "dims", [0, 0, 0])
      const mode = (scalars.weights as "uniform" | "gaussian") ?? "uniform"
      const probs = k.stitch(inputs.patches, inputs.origins, dims,
                             num(scalars, "overlap", 0.5), mode)
      return { arrays: { probs }, scalars: {} }
    }
    default:
      throw new RangeError(`unknown kernel op '${op}'`)
  }
}
