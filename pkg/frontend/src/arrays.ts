/**
 * Typed n-dimensional array views over contiguous C-order buffers, plus the
 * raw+JSON interchange codec shared with the core toolkit.
 *
 * A tensor on disk is a little-endian C-order blob `<name>.raw` next to a
 * JSON sidecar `<name>.json` holding at least `{"dims": [...], "dtype": ...}`
 * and optionally volume metadata (`spacing`, `origin`, ...). Volumes use axis
 * order (z, y, x) with spacing in millimetres.
 */

import { readFileSync, writeFileSync } from "node:fs"

export type DType =
  | "uint8"
  | "int16"
  | "uint16"
  | "int32"
  | "int64"
  | "float32"
  | "float64"

export type TypedBuffer =
  | Uint8Array
  | Int16Array
  | Uint16Array
  | Int32Array
  | Float32Array
  | Float64Array

/** Thrown when a buffer's element type does not match a kernel's contract. */
export class DTypeError extends Error {
  constructor(param: string, expected: string, got: string) {
    super(`${param}: expected ${expected}, got ${got}`)
    this.name = "DTypeError"
  }
}

/** Thrown when array dimensions violate a kernel's contract. */
export class ShapeError extends Error {
  constructor(param: string, detail: string) {
    super(`${param}: ${detail}`)
    this.name = "ShapeError"
  }
}

const CTORS: Record<DType, { new (n: number): TypedBuffer; BYTES_PER_ELEMENT: number }> = {
  uint8: Uint8Array,
  int16: Int16Array,
  uint16: Uint16Array,
  int32: Int32Array,
  // int64 blobs are widened to float64 on read (documented copy); exact for
  // label volumes, whose ids are small integers
  int64: Float64Array,
  float32: Float32Array,
  float64: Float64Array,
}

function dtypeOf(data: TypedBuffer, param: string): DType {
  if (data instanceof Uint8Array) return "uint8"
  if (data instanceof Int16Array) return "int16"
  if (data instanceof Uint16Array) return "uint16"
  if (data instanceof Int32Array) return "int32"
  if (data instanceof Float32Array) return "float32"
  if (data instanceof Float64Array) return "float64"
  throw new DTypeError(param, "a supported typed array", (data as object).constructor.name)
}

export interface ArrayViewMeta {
  spacing?: [number, number, number]
  origin?: [number, number, number]
  [key: string]: unknown
}

/**
 * Contiguous C-order tensor: typed buffer + shape + optional mm metadata.
 * Construction is zero-copy; the buffer is adopted, not duplicated.
 */
export class ArrayView {
  readonly data: TypedBuffer
  readonly shape: readonly number[]
  readonly dtype: DType
  readonly meta: ArrayViewMeta

  constructor(data: TypedBuffer, shape: readonly number[], meta: ArrayViewMeta = {}) {
    const n = shape.reduce((a, b) => a * b, 1)
    if (shape.some((s) => !Number.isInteger(s) || s <= 0))
      throw new ShapeError("shape", `dims must be positive integers, got [${shape}]`)
    if (data.length !== n)
      throw new ShapeError("data", `buffer has ${data.length} elements, shape [${shape}] requires ${n}`)
    this.data = data
    this.shape = [...shape]
    this.dtype = dtypeOf(data, "data")
    this.meta = meta
  }

  get size(): number {
    return this.data.length
  }

  get spacing(): [number, number, number] {
    const s = this.meta.spacing
    return s ? [s[0], s[1], s[2]] : [1, 1, 1]
  }

  /** The buffer reinterpreted as float64, copying only when necessary. */
  asFloat64(param = "array"): Float64Array {
    if (this.data instanceof Float64Array) return this.data
    return Float64Array.from(this.data)
  }

  expect(param: string, dtype: DType, ndim?: number): ArrayView {
    if (this.dtype !== dtype) throw new DTypeError(param, dtype, this.dtype)
    if (ndim !== undefined && this.shape.length !== ndim)
      throw new ShapeError(param, `expected ${ndim}D, got shape [${this.shape}]`)
    return this
  }
}

function stripRaw(path: string): string {
  return path.replace(/\.(raw|json)$/, "")
}

/** Read one tensor from a `<name>.raw` + `<name>.json` pair. */
export function readTensor(path: string): ArrayView {
  const base = stripRaw(path)
  const meta = JSON.parse(readFileSync(`${base}.json`, "utf8")) as {
    dims: number[]
    dtype?: DType
    [key: string]: unknown
  }
  const dtype = meta.dtype ?? "float32"
  const ctor = CTORS[dtype]
  if (!ctor) throw new DTypeError(path, "a supported dtype", String(dtype))
  const blob = readFileSync(`${base}.raw`)
  const n = meta.dims.reduce((a, b) => a * b, 1)
  let data: TypedBuffer
  if (dtype === "int64") {
    const wide = new BigInt64Array(blob.buffer, blob.byteOffset, n)
    data = Float64Array.from(wide, Number)
  } else {
    // Buffer slices of a pool may be unaligned; copy into a fresh buffer
    const bytes = new Uint8Array(blob.buffer, blob.byteOffset, n * ctor.BYTES_PER_ELEMENT)
    data = new ctor(n)
    new Uint8Array(data.buffer).set(bytes)
  }
  const { dims, dtype: _d, ...rest } = meta
  return new ArrayView(data, dims, rest as ArrayViewMeta)
}

/** Write a tensor as a `<name>.raw` blob plus JSON sidecar. */
export function writeTensor(path: string, view: ArrayView): void {
  const base = stripRaw(path)
  const sidecar = { dims: view.shape, dtype: view.dtype, ...view.meta }
  writeFileSync(`${base}.json`, JSON.stringify(sidecar, null, 1))
  writeFileSync(
    `${base}.raw`,
    new Uint8Array(view.data.buffer, view.data.byteOffset, view.data.byteLength),
  )
}
