/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const doublet_curve: (a: number, b: number, c: number) => [number, number];
export const harmony_demo: (a: number, b: number, c: number, d: bigint) => [number, number];
export const train_demo: (a: number, b: number, c: number, d: bigint) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
