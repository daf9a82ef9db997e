/**
 * Backends turn a forward request into per-position sparse distributions.
 *
 * Two implementations ship: a scripted replay of a recording file (see
 * replay.ts) and a uniform placeholder.  A real mask-denoising model is
 * wired by implementing `Backend.distributions`: inspect the slots and
 * masked positions, run the model, and return for each requested position a
 * `top` list of (token string, probability) pairs plus a `rest_mass` that is
 * spread uniformly over every unlisted token by the engine.  Listed
 * probabilities plus rest_mass must sum to 1 within 1e-6.
 */

import type { DistEntry, ForwardRequest } from "./protocol";

export class BackendError extends Error {}

export interface Backend {
  distributions(request: ForwardRequest): Record<string, DistEntry>;
}

/** Placeholder model hook: everything unlisted, i.e. uniform mass. */
export class UniformBackend implements Backend {
  distributions(request: ForwardRequest): Record<string, DistEntry> {
    const positions: Record<string, DistEntry> = {};
    for (const pos of request.masked) {
      positions[String(pos)] = { top: [], rest_mass: 1.0 };
    }
    return positions;
  }
}
