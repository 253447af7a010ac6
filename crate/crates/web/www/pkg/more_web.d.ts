/* tslint:disable */
/* eslint-disable */

/**
 * Doublet posterior `L_d(q)` sampled at `n` evenly spaced points of [0, 1].
 */
export function doublet_curve(rho: number, r: number, n: number): string;

/**
 * Harmony correction of two-batch Gaussian blobs.
 */
export function harmony_demo(n_cells: number, batch_offset: number, lambda_div: number, seed: bigint): string;

/**
 * Trains a small head on blobs and reports the loss curve and the
 * refined embedding.
 */
export function train_demo(n_cells: number, epochs: number, depth: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly doublet_curve: (a: number, b: number, c: number) => [number, number];
    readonly harmony_demo: (a: number, b: number, c: number, d: bigint) => [number, number];
    readonly train_demo: (a: number, b: number, c: number, d: bigint) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
