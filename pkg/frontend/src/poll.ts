// Job polling with backoff; one in-flight job per scene is enforced by the
// caller disabling submit while a poll loop runs.

import type { ApiClient } from "./api.js";
import type { JobJson } from "./types.js";

export interface PollOptions {
  initialMs?: number;
  maxMs?: number;
  factor?: number;
  timeoutMs?: number;
  onProgress?: (job: JobJson) => void;
  sleep?: (ms: number) => Promise<void>;
}

const defaultSleep = (ms: number) => new Promise<void>((r) => setTimeout(r, ms));

export async function pollJob(api: ApiClient, jobId: string,
                              opts: PollOptions = {}): Promise<JobJson> {
  const initial = opts.initialMs ?? 250;
  const max = opts.maxMs ?? 4000;
  const factor = opts.factor ?? 1.6;
  const timeout = opts.timeoutMs ?? 10 * 60 * 1000;
  const sleep = opts.sleep ?? defaultSleep;

  let delay = initial;
  const start = Date.now();
  for (;;) {
    const job = await api.getJob(jobId);
    opts.onProgress?.(job);
    if (job.status === "done") return job;
    if (job.status === "failed") throw new Error(`job ${jobId} failed: ${job.error}`);
    if (Date.now() - start > timeout) throw new Error(`job ${jobId} timed out`);
    await sleep(delay);
    delay = Math.min(max, delay * factor);
  }
}
