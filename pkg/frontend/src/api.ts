// Typed client for the annotation server. All persistence authority is
// server-side; this module only moves JSON.

export interface SampleInfo {
  id: string;
  split: string;
  width: number;
  height: number;
  provenance: string;
  has_annotation: boolean;
}

export interface AnnotationRecord {
  sample_id: string;
  points: [number, number][];
  vhs: number;
  annotator: string;
  timestamp: string;
  provenance: string;
  class?: number;
}

export interface ScoreResult {
  vhs: number;
  class: number;
}

export interface Prediction {
  id: string;
  mu: [number, number][];
  sigma: [number, number][];
  max_sigma: number;
  tau: number;
  confident: boolean;
  k_passes: number;
  vhs: number | null;
  class: number | null;
}

export interface RoundReport {
  round_index: number;
  n_pool: number;
  n_confident: number;
  [key: string]: unknown;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let code = "unknown";
  let message = response.statusText;
  try {
    const body = await response.json();
    if (body && body.error) {
      code = body.error.code ?? code;
      message = body.error.message ?? message;
    }
  } catch {
    // non-JSON error body; keep the status text
  }
  return new ApiError(response.status, code, message);
}

export class Client {
  constructor(public base: string) {
    this.base = base.replace(/\/$/, "");
  }

  private async go<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(this.base + path, init);
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  async listSamples(split?: string): Promise<SampleInfo[]> {
    const query = split ? `?split=${encodeURIComponent(split)}` : "";
    const body = await this.go<{ samples: SampleInfo[] }>(`/samples${query}`);
    return body.samples;
  }

  imageUrl(id: string): string {
    return `${this.base}/samples/${encodeURIComponent(id)}/image`;
  }

  getAnnotation(id: string): Promise<AnnotationRecord> {
    return this.go(`/samples/${encodeURIComponent(id)}/annotation`);
  }

  putAnnotation(
    id: string,
    points: [number, number][],
    annotator: string,
  ): Promise<ScoreResult> {
    return this.go(`/samples/${encodeURIComponent(id)}/annotation`, {
      method: "PUT",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ points, annotator }),
    });
  }

  scorePoints(points: [number, number][]): Promise<ScoreResult> {
    return this.go("/vhs", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ points }),
    });
  }

  getPrediction(id: string, tau?: number): Promise<Prediction> {
    const query = tau === undefined ? "" : `?tau=${tau}`;
    return this.go(`/predictions/${encodeURIComponent(id)}${query}`);
  }

  async getRounds(): Promise<RoundReport[]> {
    const body = await this.go<{ rounds: RoundReport[] }>("/pseudo/rounds");
    return body.rounds;
  }
}
