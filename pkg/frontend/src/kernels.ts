/**
 * TypeScript implementations of the voxgeo numeric kernels.
 *
 * Every function mirrors the core library's contract on plain typed buffers:
 * volumes are C-order (z, y, x), feature maps (C, D, H, W), spacing in mm.
 * Arithmetic runs in float64 throughout; outputs that the core emits as
 * float32 are rounded with Math.fround so results agree elementwise.
 *
 * Gradients are separate functions, not an autodiff graph — chaining them
 * into a training framework is the caller's responsibility.
 */

import { ArrayView, DTypeError, ShapeError } from "./arrays"

const BIG = 1e30

export type Triple = [number, number, number]

function prod(xs: readonly number[]): number {
  return xs.reduce((a, b) => a * b, 1)
}

function sameShape(a: readonly number[], b: readonly number[]): boolean {
  return a.length === b.length && a.every((v, i) => v === b[i])
}

/** Round half to even, matching Python's round() used by the stitch planner. */
export function roundHalfEven(x: number): number {
  const floor = Math.floor(x)
  const frac = x - floor
  if (frac > 0.5) return floor + 1
  if (frac < 0.5) return floor
  return floor % 2 === 0 ? floor : floor + 1
}

// ── Ambiguity gating ─────────────────────────────────────────────────────────

/** Gini-style ambiguity 4·p·(1−p): 0 at confident voxels, 1 at p = 0.5. */
export function ambiguityField(pFg: ArrayView): ArrayView {
  const p = pFg.asFloat64("p_fg")
  if (pFg.shape.length !== 3)
    throw new ShapeError("p_fg", `expected 3D, got shape [${pFg.shape}]`)
  const out = new Float32Array(p.length)
  for (let i = 0; i < p.length; i++) {
    const v = p[i]
    if (v < -1e-6 || v > 1 + 1e-6)
      throw new RangeError(`p_fg: probabilities must lie in [0, 1], got ${v}`)
    out[i] = Math.min(Math.max(4 * v * (1 - v), 0), 1)
  }
  return new ArrayView(out, pFg.shape, { spacing: pFg.meta.spacing })
}

/** Binary gate A(v) > tau (strict inequality; ties stay inactive). */
export function gatingMask(field: ArrayView, tau: number): ArrayView {
  if (!(tau >= 0 && tau <= 1))
    throw new RangeError(`tau must lie in [0, 1], got ${tau}`)
  if (field.shape.length !== 3)
    throw new ShapeError("field", `expected 3D, got shape [${field.shape}]`)
  const a = field.data
  const out = new Uint8Array(a.length)
  for (let i = 0; i < a.length; i++) out[i] = a[i] > tau ? 1 : 0
  return new ArrayView(out, field.shape)
}

function checkFeaturePair(fIn: ArrayView, fRef: ArrayView, mask: ArrayView) {
  if (fIn.shape.length !== 4)
    throw new ShapeError("f_in", `expected 4D (C, D, H, W), got [${fIn.shape}]`)
  if (!sameShape(fIn.shape, fRef.shape))
    throw new ShapeError("f_ref", `shape [${fRef.shape}] != f_in [${fIn.shape}]`)
  if (!sameShape(mask.shape, fIn.shape.slice(1)))
    throw new ShapeError("mask", `shape [${mask.shape}] != spatial dims [${fIn.shape.slice(1)}]`)
}

/**
 * Gated residual fusion: F_in + alpha · (M ⊙ F_ref). Voxels outside the
 * gate pass through bit-identical, not merely with a zeroed residual.
 */
export function gatedFusion(
  fIn: ArrayView,
  fRef: ArrayView,
  mask: ArrayView,
  alpha: number,
): ArrayView {
  checkFeaturePair(fIn, fRef, mask)
  const a = fIn.asFloat64("f_in")
  const b = fRef.asFloat64("f_ref")
  const m = mask.data
  const spatial = m.length
  const out = new Float64Array(a.length)
  for (let i = 0; i < a.length; i++)
    out[i] = m[i % spatial] !== 0 ? a[i] + alpha * b[i] : a[i]
  return new ArrayView(out, fIn.shape)
}

/** Analytic gradients of gated fusion w.r.t. both inputs and alpha. */
export function gatedFusionGrad(
  fIn: ArrayView,
  fRef: ArrayView,
  mask: ArrayView,
  alpha: number,
  upstream: ArrayView,
): { gradFIn: ArrayView; gradFRef: ArrayView; gradAlpha: number } {
  checkFeaturePair(fIn, fRef, mask)
  if (!sameShape(upstream.shape, fIn.shape))
    throw new ShapeError("upstream", `shape [${upstream.shape}] != f_in [${fIn.shape}]`)
  const b = fRef.asFloat64("f_ref")
  const up = upstream.asFloat64("upstream")
  const m = mask.data
  const spatial = m.length
  const gIn = Float64Array.from(up)
  const gRef = new Float64Array(up.length)
  let gAlpha = 0
  for (let i = 0; i < up.length; i++) {
    if (m[i % spatial] !== 0) {
      gRef[i] = alpha * up[i]
      gAlpha += up[i] * b[i]
    }
  }
  return {
    gradFIn: new ArrayView(gIn, fIn.shape),
    gradFRef: new ArrayView(gRef, fIn.shape),
    gradAlpha: gAlpha,
  }
}

// ── Signed distance maps ─────────────────────────────────────────────────────

/** One exact lower-envelope squared-distance pass over a single row. */
function edtRow(
  f: Float64Array,
  n: number,
  scale2: number,
  v: Int32Array,
  z: Float64Array,
  d: Float64Array,
): void {
  let k = 0
  v[0] = 0
  z[0] = -Infinity
  z[1] = Infinity
  for (let q = 1; q < n; q++) {
    // envelope bounds must be infinite: intersections of parabolas over
    // BIG placeholder values can fall below any finite sentinel
    let s =
      (f[q] + scale2 * q * q - (f[v[k]] + scale2 * v[k] * v[k])) /
      (2 * scale2 * (q - v[k]))
    while (s <= z[k]) {
      k -= 1
      s =
        (f[q] + scale2 * q * q - (f[v[k]] + scale2 * v[k] * v[k])) /
        (2 * scale2 * (q - v[k]))
    }
    k += 1
    v[k] = q
    z[k] = s
    z[k + 1] = Infinity
  }
  k = 0
  for (let q = 0; q < n; q++) {
    while (z[k + 1] < q) k += 1
    d[q] = scale2 * (q - v[k]) * (q - v[k]) + f[v[k]]
  }
  f.set(d.subarray(0, n))
}

/** Exact squared Euclidean distance (mm²) to the nearest true voxel. */
export function edtSquared(feature: Uint8Array, dims: Triple, spacing: Triple): Float64Array {
  const [nz, ny, nx] = dims
  const g = new Float64Array(feature.length)
  let any = false
  for (let i = 0; i < feature.length; i++) {
    g[i] = feature[i] !== 0 ? 0 : BIG
    any = any || feature[i] !== 0
  }
  if (!any) throw new RangeError("feature set is empty; distances are undefined")
  const nmax = Math.max(nz, ny, nx)
  const row = new Float64Array(nmax)
  const v = new Int32Array(nmax)
  const z = new Float64Array(nmax + 1)
  const d = new Float64Array(nmax)
  const strides: Triple = [ny * nx, nx, 1]
  for (let axis = 0; axis < 3; axis++) {
    const n = dims[axis]
    const step = strides[axis]
    const scale2 = spacing[axis] * spacing[axis]
    const [oa, ob] = [0, 1, 2].filter((a) => a !== axis)
    for (let i = 0; i < dims[oa]; i++) {
      for (let j = 0; j < dims[ob]; j++) {
        const base = i * strides[oa] + j * strides[ob]
        for (let q = 0; q < n; q++) row[q] = g[base + q * step]
        edtRow(row, n, scale2, v, z, d)
        for (let q = 0; q < n; q++) g[base + q * step] = row[q]
      }
    }
  }
  return g
}

/**
 * Foreground voxels with at least one background 6-neighbor. The volume
 * border alone does not make a voxel a boundary voxel.
 */
export function boundaryMask(fg: Uint8Array, dims: Triple): Uint8Array {
  const [nz, ny, nx] = dims
  const out = new Uint8Array(fg.length)
  let i = 0
  for (let zi = 0; zi < nz; zi++)
    for (let yi = 0; yi < ny; yi++)
      for (let xi = 0; xi < nx; xi++, i++) {
        if (fg[i] === 0) continue
        const bg =
          (zi > 0 && fg[i - ny * nx] === 0) ||
          (zi < nz - 1 && fg[i + ny * nx] === 0) ||
          (yi > 0 && fg[i - nx] === 0) ||
          (yi < ny - 1 && fg[i + nx] === 0) ||
          (xi > 0 && fg[i - 1] === 0) ||
          (xi < nx - 1 && fg[i + 1] === 0)
        if (bg) out[i] = 1
      }
  return out
}

/**
 * Exact signed Euclidean distance to the foreground-union boundary, in mm:
 * boundary voxels carry exactly 0, strict interior is negative, exterior
 * positive. Distances are voxel-center to voxel-center.
 */
export function signedDistanceMap(labels: ArrayView, spacing?: Triple): ArrayView {
  if (labels.shape.length !== 3)
    throw new ShapeError("labels", `expected 3D, got shape [${labels.shape}]`)
  if (labels.dtype === "float32")
    throw new DTypeError("labels", "an integer label volume", labels.dtype)
  const dims = labels.shape as unknown as Triple
  const sp = spacing ?? labels.spacing
  const lab = labels.data
  const fg = new Uint8Array(lab.length)
  let nFg = 0
  for (let i = 0; i < lab.length; i++) {
    fg[i] = lab[i] > 0 ? 1 : 0
    nFg += fg[i]
  }
  if (nFg === 0) throw new RangeError("target region is empty; no boundary exists")
  if (nFg === lab.length)
    throw new RangeError("target region fills the volume; no boundary exists")
  const bnd = boundaryMask(fg, dims)
  const phi = edtSquared(bnd, dims, sp)
  for (let i = 0; i < phi.length; i++) {
    if (bnd[i] !== 0) phi[i] = 0
    else phi[i] = fg[i] !== 0 ? -Math.sqrt(phi[i]) : Math.sqrt(phi[i])
  }
  return new ArrayView(phi, labels.shape, { spacing: sp })
}

// ── Anatomical weighted pooling ──────────────────────────────────────────────

function checkAwp(x: ArrayView, m: ArrayView, eps: number) {
  if (eps <= 0) throw new RangeError(`eps must be positive, got ${eps}`)
  if (x.shape.length !== 4)
    throw new ShapeError("x", `expected 4D (C, D, H, W), got [${x.shape}]`)
  if (!sameShape(m.shape, x.shape.slice(1)))
    throw new ShapeError("m", `shape [${m.shape}] != spatial dims [${x.shape.slice(1)}]`)
}

/** Attention-weighted channel pooling: sum(X_c · m) / (sum(m) + eps). */
export function anatomicalWeightedPooling(x: ArrayView, m: ArrayView, eps = 1e-5): Float64Array {
  checkAwp(x, m, eps)
  const data = x.asFloat64("x")
  const mask = m.asFloat64("m")
  const c = x.shape[0]
  const spatial = mask.length
  let denom = eps
  for (let i = 0; i < spatial; i++) denom += mask[i]
  const z = new Float64Array(c)
  for (let ci = 0; ci < c; ci++) {
    let acc = 0
    const off = ci * spatial
    for (let i = 0; i < spatial; i++) acc += data[off + i] * mask[i]
    z[ci] = acc / denom
  }
  return z
}

/** Analytic gradients of weighted pooling w.r.t. features and attention. */
export function awpGrad(
  x: ArrayView,
  m: ArrayView,
  eps: number,
  upstream: Float64Array,
): { gradX: ArrayView; gradM: ArrayView } {
  checkAwp(x, m, eps)
  const data = x.asFloat64("x")
  const mask = m.asFloat64("m")
  const c = x.shape[0]
  if (upstream.length !== c)
    throw new ShapeError("upstream", `expected length ${c}, got ${upstream.length}`)
  const spatial = mask.length
  let denom = eps
  for (let i = 0; i < spatial; i++) denom += mask[i]
  let upDotNum = 0
  for (let ci = 0; ci < c; ci++) {
    let acc = 0
    const off = ci * spatial
    for (let i = 0; i < spatial; i++) acc += data[off + i] * mask[i]
    upDotNum += upstream[ci] * acc
  }
  const gx = new Float64Array(data.length)
  const gm = new Float64Array(spatial)
  for (let ci = 0; ci < c; ci++) {
    const off = ci * spatial
    for (let i = 0; i < spatial; i++) {
      gx[off + i] = (upstream[ci] * mask[i]) / denom
      gm[i] += upstream[ci] * data[off + i]
    }
  }
  for (let i = 0; i < spatial; i++)
    gm[i] = (gm[i] * denom - upDotNum) / (denom * denom)
  return {
    gradX: new ArrayView(gx, x.shape),
    gradM: new ArrayView(gm, m.shape),
  }
}

// ── Losses ───────────────────────────────────────────────────────────────────

const LOG_CLAMP = 1e-7

function checkPredGt(pred: ArrayView, gt: ArrayView) {
  if (pred.shape.length !== 4)
    throw new ShapeError("pred", `expected 4D (C, D, H, W), got [${pred.shape}]`)
  if (!sameShape(gt.shape, pred.shape.slice(1)))
    throw new ShapeError("gt", `shape [${gt.shape}] != spatial dims [${pred.shape.slice(1)}]`)
  if (gt.dtype === "float32")
    throw new DTypeError("gt", "an integer label volume", gt.dtype)
}

/**
 * Mean voxelwise cross-entropy with the gradient w.r.t. probabilities:
 * nonzero only at true-class entries, −1 / (p·|Ω|), p clamped below.
 */
export function crossEntropy(pred: ArrayView, gt: ArrayView): { loss: number; grad: ArrayView } {
  checkPredGt(pred, gt)
  const p = pred.asFloat64("pred")
  const y = gt.data
  const n = y.length
  const grad = new Float64Array(p.length)
  let logSum = 0
  for (let i = 0; i < n; i++) {
    const pc = Math.max(p[y[i] * n + i], LOG_CLAMP)
    logSum += Math.log(pc)
    grad[y[i] * n + i] = -1 / (pc * n)
  }
  return { loss: -logSum / n, grad: new ArrayView(grad, pred.shape) }
}

/** Class-mean soft Dice complement over all channels, with its gradient. */
export function softDice(
  pred: ArrayView,
  gt: ArrayView,
  eps = 1e-5,
): { loss: number; grad: ArrayView } {
  checkPredGt(pred, gt)
  const p = pred.asFloat64("pred")
  const y = gt.data
  const c = pred.shape[0]
  const n = y.length
  const inter = new Float64Array(c)
  const psum = new Float64Array(c)
  const gsum = new Float64Array(c)
  for (let ci = 0; ci < c; ci++) {
    const off = ci * n
    for (let i = 0; i < n; i++) {
      psum[ci] += p[off + i]
      if (y[i] === ci) inter[ci] += p[off + i]
    }
  }
  for (let i = 0; i < n; i++) gsum[y[i]] += 1
  let loss = 0
  const grad = new Float64Array(p.length)
  for (let ci = 0; ci < c; ci++) {
    const denom = psum[ci] + gsum[ci] + eps
    loss += 1 - (2 * inter[ci]) / denom
    const off = ci * n
    for (let i = 0; i < n; i++) {
      const onehot = y[i] === ci ? 1 : 0
      grad[off + i] = -((2 * onehot * denom - 2 * inter[ci]) / (denom * denom)) / c
    }
  }
  return { loss: loss / c, grad: new ArrayView(grad, pred.shape) }
}

// ── Surface distances ────────────────────────────────────────────────────────

/**
 * Surface voxel centers of one class in mm (x, y, z): any different-class
 * 6-neighbor exposes a voxel, and the volume border counts as different.
 */
export function extractSurface(labels: ArrayView, cls: number, spacing?: Triple): Float64Array {
  if (labels.shape.length !== 3)
    throw new ShapeError("labels", `expected 3D, got shape [${labels.shape}]`)
  const [nz, ny, nx] = labels.shape
  const [sz, sy, sx] = spacing ?? labels.spacing
  const lab = labels.data
  const pts: number[] = []
  let i = 0
  for (let zi = 0; zi < nz; zi++)
    for (let yi = 0; yi < ny; yi++)
      for (let xi = 0; xi < nx; xi++, i++) {
        if (lab[i] !== cls) continue
        const exposed =
          zi === 0 || lab[i - ny * nx] !== cls ||
          zi === nz - 1 || lab[i + ny * nx] !== cls ||
          yi === 0 || lab[i - nx] !== cls ||
          yi === ny - 1 || lab[i + nx] !== cls ||
          xi === 0 || lab[i - 1] !== cls ||
          xi === nx - 1 || lab[i + 1] !== cls
        if (exposed) pts.push(xi * sx, yi * sy, zi * sz)
      }
  if (pts.length === 0) throw new RangeError(`class ${cls} absent from volume`)
  return Float64Array.from(pts)
}

function directedDistances(a: Float64Array, b: Float64Array): Float64Array {
  const na = a.length / 3
  const nb = b.length / 3
  const out = new Float64Array(na)
  for (let i = 0; i < na; i++) {
    const [ax, ay, az] = [a[3 * i], a[3 * i + 1], a[3 * i + 2]]
    let best = Infinity
    for (let j = 0; j < nb; j++) {
      const dx = ax - b[3 * j]
      const dy = ay - b[3 * j + 1]
      const dz = az - b[3 * j + 2]
      const d2 = dx * dx + dy * dy + dz * dz
      if (d2 < best) best = d2
    }
    out[i] = Math.sqrt(best)
  }
  return out
}

function h95(d: Float64Array): number {
  const s = Float64Array.from(d).sort()
  return s[Math.ceil(0.95 * s.length) - 1]
}

/**
 * 95% Hausdorff (nearest-rank rule, symmetric max) and average symmetric
 * surface distance between one class's surfaces in two label volumes.
 */
export function surfaceDistances(
  pred: ArrayView,
  gt: ArrayView,
  cls: number,
  spacing: Triple,
): { hd95: number; assd: number } {
  const sp = extractSurface(pred, cls, spacing)
  const sg = extractSurface(gt, cls, spacing)
  const dAb = directedDistances(sp, sg)
  const dBa = directedDistances(sg, sp)
  let total = 0
  for (const d of dAb) total += d
  for (const d of dBa) total += d
  return {
    hd95: Math.max(h95(dAb), h95(dBa)),
    assd: total / (dAb.length + dBa.length),
  }
}

// ── Sliding-window stitching ─────────────────────────────────────────────────

/** Uniform or separable-Gaussian (sigma = size/8, floor 1e-3) weights. */
export function makeWeightWindow(window: Triple, mode: "uniform" | "gaussian"): Float64Array {
  const n = prod(window)
  if (mode === "uniform") return new Float64Array(n).fill(1)
  if (mode !== "gaussian") throw new RangeError(`unknown weight mode '${mode}'`)
  const axes = window.map((len) => {
    const sigma = Math.max(len / 8, 1e-6)
    const ax = new Float64Array(len)
    for (let i = 0; i < len; i++) {
      const t = (i - (len - 1) / 2) / sigma
      ax[i] = Math.exp(-0.5 * t * t)
    }
    return ax
  })
  const w = new Float64Array(n)
  let i = 0
  for (let zi = 0; zi < window[0]; zi++)
    for (let yi = 0; yi < window[1]; yi++)
      for (let xi = 0; xi < window[2]; xi++, i++)
        w[i] = Math.max(axes[0][zi] * axes[1][yi] * axes[2][xi], 1e-3)
  return w
}

/**
 * Sliding-window origins: stride = round(window · (1 − overlap)), minimum 1,
 * with the final origin per axis clamped to dims − window.
 */
export function planWindows(dims: Triple, window: Triple, overlap: number): Triple[] {
  if (!(overlap >= 0 && overlap < 1))
    throw new RangeError(`overlap must lie in [0, 1), got ${overlap}`)
  if (window.some((w, i) => w <= 0 || w > dims[i]))
    throw new ShapeError("window", `[${window}] incompatible with dims [${dims}]`)
  const perAxis = dims.map((d, i) => {
    const stride = Math.max(1, roundHalfEven(window[i] * (1 - overlap)))
    const origins: number[] = []
    for (let o = 0; o <= d - window[i]; o += stride) origins.push(o)
    if (origins[origins.length - 1] !== d - window[i]) origins.push(d - window[i])
    return origins
  })
  const out: Triple[] = []
  for (const z of perAxis[0])
    for (const y of perAxis[1])
      for (const x of perAxis[2]) out.push([z, y, x])
  return out
}

/**
 * Blend origin-tagged probability patches (N, C, wz, wy, wx) into a full
 * (C, dz, dy, dx) volume by weighted averaging accumulated in float64; the
 * result is clipped to [0, 1] and rounded to float32 like the core.
 */
export function stitch(
  patches: ArrayView,
  origins: ArrayView,
  dims: Triple,
  overlap = 0.5,
  mode: "uniform" | "gaussian" = "uniform",
): ArrayView {
  if (patches.shape.length !== 5)
    throw new ShapeError("patches", `expected 5D (N, C, wz, wy, wx), got [${patches.shape}]`)
  if (origins.shape.length !== 2 || origins.shape[1] !== 3 || origins.shape[0] !== patches.shape[0])
    throw new ShapeError("origins", `expected (${patches.shape[0]}, 3), got [${origins.shape}]`)
  const [nPatch, c, wz, wy, wx] = patches.shape
  const window: Triple = [wz, wy, wx]
  const plan = new Set(planWindows(dims, window, overlap).map((o) => o.join(",")))
  const weights = makeWeightWindow(window, mode)
  const data = patches.asFloat64("patches")
  const org = origins.data
  const [dz, dy, dx] = dims
  const vol = dz * dy * dx
  const accum = new Float64Array(c * vol)
  const wsum = new Float64Array(vol)
  const patchVoxels = wz * wy * wx
  for (let pi = 0; pi < nPatch; pi++) {
    const oz = org[3 * pi]
    const oy = org[3 * pi + 1]
    const ox = org[3 * pi + 2]
    if (!plan.has(`${oz},${oy},${ox}`))
      throw new RangeError(`origin (${oz}, ${oy}, ${ox}) not in the stitch plan`)
    let wi = 0
    for (let zi = 0; zi < wz; zi++)
      for (let yi = 0; yi < wy; yi++)
        for (let xi = 0; xi < wx; xi++, wi++) {
          const dst = (oz + zi) * dy * dx + (oy + yi) * dx + (ox + xi)
          wsum[dst] += weights[wi]
          for (let ci = 0; ci < c; ci++)
            accum[ci * vol + dst] +=
              weights[wi] * data[pi * c * patchVoxels + ci * patchVoxels + wi]
        }
  }
  for (let i = 0; i < vol; i++)
    if (wsum[i] === 0) throw new RangeError("stitch plan leaves uncovered voxels")
  const out = new Float32Array(c * vol)
  for (let ci = 0; ci < c; ci++)
    for (let i = 0; i < vol; i++)
      out[ci * vol + i] = Math.min(Math.max(accum[ci * vol + i] / wsum[i], 0), 1)
  const shape = c === 1 ? [dz, dy, dx] : [c, dz, dy, dx]
  return new ArrayView(out, shape)
}
