/* tslint:disable */
/* eslint-disable */

/**
 * A small residual codec trained in the browser on synthetic speech.
 */
export class RvqDemo {
    free(): void;
    [Symbol.dispose](): void;
    n_codebooks(): number;
    constructor(n_codebooks: number, codebook_size: number, seed: number);
    /**
     * Decodes `samples` using only the first `stages` codebooks.
     */
    reconstruct(samples: Float32Array, stages: number): Float32Array;
    /**
     * SI-SNR in dB of the reconstruction after 1..=L stages.
     */
    stage_si_snr(samples: Float32Array): Float64Array;
}

/**
 * Applies one distortion. `amount` is the SNR in dB for `white_noise` and
 * `noise`, the target rate in Hz for `downsample`, the drop probability
 * for `packet_loss` and the RT60 in seconds for `reverb`.
 */
export function degrade(samples: Float32Array, kind: string, amount: number, seed: number): Float32Array;

/**
 * Attention scores `<R(m)q, R(n)k>` for `m = base + offset`, `n = base`,
 * offsets `0..n_offsets`, with seeded random `q`, `k`. Rotary embeddings
 * make the curve independent of `base`.
 */
export function rope_scores(dim: number, theta: number, base: number, n_offsets: number, seed: number): Float64Array;

export function spectrogram_height(): number;

/**
 * Log-mel spectrogram as RGBA pixels, ready for `ImageData`.
 */
export function spectrogram_rgba(samples: Float32Array): Uint8Array;

/**
 * Width in pixels (frames) of the spectrogram of `n_samples` samples.
 */
export function spectrogram_width(n_samples: number): number;

/**
 * A synthetic speech-like clip.
 */
export function speech_clip(seed: number, seconds: number): Float32Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_rvqdemo_free: (a: number, b: number) => void;
    readonly degrade: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly rope_scores: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly rvqdemo_n_codebooks: (a: number) => number;
    readonly rvqdemo_new: (a: number, b: number, c: number) => [number, number, number];
    readonly rvqdemo_reconstruct: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly rvqdemo_stage_si_snr: (a: number, b: number, c: number) => [number, number, number, number];
    readonly spectrogram_height: () => number;
    readonly spectrogram_rgba: (a: number, b: number) => [number, number, number, number];
    readonly spectrogram_width: (a: number) => number;
    readonly speech_clip: (a: number, b: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
