/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_rvqdemo_free: (a: number, b: number) => void;
export const degrade: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const rope_scores: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const rvqdemo_n_codebooks: (a: number) => number;
export const rvqdemo_new: (a: number, b: number, c: number) => [number, number, number];
export const rvqdemo_reconstruct: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const rvqdemo_stage_si_snr: (a: number, b: number, c: number) => [number, number, number, number];
export const spectrogram_height: () => number;
export const spectrogram_rgba: (a: number, b: number) => [number, number, number, number];
export const spectrogram_width: (a: number) => number;
export const speech_clip: (a: number, b: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
