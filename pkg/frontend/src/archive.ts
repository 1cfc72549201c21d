// Structural checks for model snapshot documents: run before uploading one
// to resume a project and on every downloaded snapshot. This mirrors the
// wire format only; validating array geometry against the layer stack is
// the server's job.

export function checkArchive(doc: unknown): string[] {
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    return ["document must be a JSON object"];
  }
  const issues: string[] = [];
  const d = doc as Record<string, unknown>;
  if (d["format_version"] !== "gradloom-1") {
    issues.push('format_version must be "gradloom-1"');
  }
  const spec = d["spec"];
  if (!Array.isArray(spec) || spec.length === 0) {
    issues.push("spec must be a non-empty array of layer objects");
  } else {
    spec.forEach((layer, i) => {
      if (typeof layer !== "object" || layer === null
          || typeof (layer as Record<string, unknown>)["kind"] !== "string") {
        issues.push(`spec[${i}] needs a string "kind"`);
      }
    });
  }
  checkLayerArrays(d["params"], "params", issues, true);
  checkLayerArrays(d["adagrad"], "adagrad", issues, false);
  const hyper = d["hyper"];
  if (typeof hyper !== "object" || hyper === null
      || typeof (hyper as Record<string, unknown>)["learning_rate"] !== "number") {
    issues.push("hyper must be an object with a numeric learning_rate");
  }
  const labels = d["labels"];
  if (!Array.isArray(labels) || labels.some((l) => typeof l !== "string")) {
    issues.push("labels must be an array of strings");
  }
  if (!Number.isInteger(d["iteration"]) || (d["iteration"] as number) < 0) {
    issues.push("iteration must be a non-negative integer");
  }
  if (!Number.isInteger(d["seed"])) {
    issues.push("seed must be an integer");
  }
  return issues;
}

function checkLayerArrays(
  v: unknown,
  path: string,
  issues: string[],
  withVersion: boolean,
): void {
  if (typeof v !== "object" || v === null) {
    issues.push(`${path} must be an object`);
    return;
  }
  const o = v as Record<string, unknown>;
  if (withVersion && (!Number.isInteger(o["version"]) || (o["version"] as number) < 0)) {
    issues.push(`${path}.version must be a non-negative integer`);
  }
  const layers = o["layers"];
  if (!Array.isArray(layers)) {
    issues.push(`${path}.layers must be an array`);
    return;
  }
  layers.forEach((layer, i) => {
    const la = (typeof layer === "object" && layer !== null)
      ? (layer as Record<string, unknown>)
      : {};
    for (const key of ["weights", "biases"] as const) {
      const arr = la[key];
      if (!Array.isArray(arr) || arr.some((x) => typeof x !== "number" || !Number.isFinite(x))) {
        issues.push(`${path}.layers[${i}].${key} must be an array of finite numbers`);
      }
    }
  });
}
