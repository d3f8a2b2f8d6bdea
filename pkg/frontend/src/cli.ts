/** Subprocess plumbing for the toolkit CLI.
 *
 * The bindings never re-implement any computation: every call shells out to
 * the `histograph` executable and exchanges the same serialized artifacts
 * (PPM/JSON/CSV files) the CLI itself uses, so results are byte-identical
 * to manual CLI invocations.
 */

import { execFile } from "node:child_process";
import { mkdir, mkdtemp, rm } from "node:fs/promises";
import { tmpdir } from "node:os";
import { join } from "node:path";

export interface CliOptions {
  /** executable name or path; HISTOGRAPH_CLI overrides, default "histograph" */
  cliPath?: string;
  /** per-invocation timeout in milliseconds */
  timeoutMs?: number;
}

export function resolveCli(options?: CliOptions): string {
  return options?.cliPath ?? process.env.HISTOGRAPH_CLI ?? "histograph";
}

export class HistographCliError extends Error {
  constructor(command: string[], detail: string) {
    super(`histograph ${command.join(" ")} failed: ${detail}`);
    this.name = "HistographCliError";
  }
}

export async function runCli(
  args: string[],
  options?: CliOptions,
): Promise<string> {
  const cli = resolveCli(options);
  return new Promise((resolve, reject) => {
    execFile(
      cli,
      args,
      { timeout: options?.timeoutMs ?? 600_000, maxBuffer: 1 << 26 },
      (error, stdout, stderr) => {
        if (error) {
          const detail = [stderr.trim(), stdout.trim(), error.message]
            .filter(Boolean)
            .join("\n");
          reject(new HistographCliError(args, detail));
        } else {
          resolve(stdout);
        }
      },
    );
  });
}

export async function withWorkdir<T>(
  workdir: string | undefined,
  fn: (dir: string) => Promise<T>,
): Promise<T> {
  if (workdir) {
    await mkdir(workdir, { recursive: true });
    return fn(workdir);
  }
  const dir = await mkdtemp(join(tmpdir(), "histograph-"));
  try {
    return await fn(dir);
  } finally {
    await rm(dir, { recursive: true, force: true });
  }
}
