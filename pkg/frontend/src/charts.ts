// Dependency-free SVG line charts. The coordinator emits one record per
// iteration, so series stay small enough to redraw from scratch each time.

const SVG_NS = "http://www.w3.org/2000/svg";

const W = 560;
const H = 180;
const PAD_L = 48;
const PAD_R = 10;
const PAD_T = 10;
const PAD_B = 20;

export interface ChartSeries {
  label: string;
  color: string;
  points: (number | null)[];
}

export interface ChartOptions {
  yMin?: number;
  yFormat?: (v: number) => string;
}

export function renderChart(
  host: HTMLElement,
  xs: number[],
  series: ChartSeries[],
  opts: ChartOptions = {},
): void {
  const doc = host.ownerDocument;
  host.replaceChildren();
  const svg = doc.createElementNS(SVG_NS, "svg");
  svg.setAttribute("viewBox", `0 0 ${W} ${H}`);
  svg.setAttribute("class", "chart");
  host.appendChild(svg);

  let lo = Infinity;
  let hi = -Infinity;
  for (const s of series) {
    for (const p of s.points) {
      if (p === null) continue;
      if (p < lo) lo = p;
      if (p > hi) hi = p;
    }
  }
  if (xs.length === 0 || lo > hi) {
    const empty = textAt(doc, W / 2, H / 2, "no data yet");
    empty.setAttribute("class", "chart-empty");
    empty.setAttribute("text-anchor", "middle");
    svg.appendChild(empty);
    return;
  }
  lo = Math.min(opts.yMin ?? 0, lo);
  if (hi === lo) hi = lo + 1;
  hi += (hi - lo) * 0.05;

  const x0 = xs[0];
  const x1 = xs[xs.length - 1];
  const plotW = W - PAD_L - PAD_R;
  const plotH = H - PAD_T - PAD_B;
  const sx = (x: number) => (x1 === x0 ? PAD_L + plotW / 2 : PAD_L + ((x - x0) / (x1 - x0)) * plotW);
  const sy = (v: number) => H - PAD_B - ((v - lo) / (hi - lo)) * plotH;
  const fmt = opts.yFormat ?? formatTick;

  for (let i = 0; i <= 4; i++) {
    const v = lo + (i * (hi - lo)) / 4;
    const y = sy(v);
    const grid = doc.createElementNS(SVG_NS, "line");
    grid.setAttribute("x1", String(PAD_L));
    grid.setAttribute("x2", String(W - PAD_R));
    grid.setAttribute("y1", y.toFixed(1));
    grid.setAttribute("y2", y.toFixed(1));
    grid.setAttribute("class", "grid");
    svg.appendChild(grid);
    const tick = textAt(doc, PAD_L - 4, y + 3, fmt(v));
    tick.setAttribute("class", "tick");
    tick.setAttribute("text-anchor", "end");
    svg.appendChild(tick);
  }
  const xa = textAt(doc, PAD_L, H - 6, String(x0));
  xa.setAttribute("class", "tick");
  svg.appendChild(xa);
  if (x1 !== x0) {
    const xb = textAt(doc, W - PAD_R, H - 6, String(x1));
    xb.setAttribute("class", "tick");
    xb.setAttribute("text-anchor", "end");
    svg.appendChild(xb);
  }

  for (const s of series) {
    for (const seg of segments(s.points)) {
      if (seg.length === 1) {
        const dot = doc.createElementNS(SVG_NS, "circle");
        dot.setAttribute("cx", sx(xs[seg[0].i]).toFixed(1));
        dot.setAttribute("cy", sy(seg[0].v).toFixed(1));
        dot.setAttribute("r", "2");
        dot.setAttribute("fill", s.color);
        dot.setAttribute("class", "series");
        dot.setAttribute("data-label", s.label);
        svg.appendChild(dot);
        continue;
      }
      const line = doc.createElementNS(SVG_NS, "polyline");
      line.setAttribute(
        "points",
        seg.map((p) => `${sx(xs[p.i]).toFixed(1)},${sy(p.v).toFixed(1)}`).join(" "),
      );
      line.setAttribute("fill", "none");
      line.setAttribute("stroke", s.color);
      line.setAttribute("stroke-width", "1.5");
      line.setAttribute("class", "series");
      line.setAttribute("data-label", s.label);
      svg.appendChild(line);
    }
  }

  if (series.length <= 6) {
    let lx = PAD_L + 6;
    for (const s of series) {
      const lastValue = lastNonNull(s.points);
      const caption = lastValue === null ? s.label : `${s.label} ${fmt(lastValue)}`;
      const entry = textAt(doc, lx, PAD_T + 8, caption);
      entry.setAttribute("class", "legend");
      entry.setAttribute("fill", s.color);
      svg.appendChild(entry);
      lx += caption.length * 7 + 14;
    }
  }
}

function segments(points: (number | null)[]): { i: number; v: number }[][] {
  const out: { i: number; v: number }[][] = [];
  let run: { i: number; v: number }[] = [];
  points.forEach((v, i) => {
    if (v === null) {
      if (run.length > 0) out.push(run);
      run = [];
    } else {
      run.push({ i, v });
    }
  });
  if (run.length > 0) out.push(run);
  return out;
}

function lastNonNull(points: (number | null)[]): number | null {
  for (let i = points.length - 1; i >= 0; i--) {
    if (points[i] !== null) return points[i];
  }
  return null;
}

function textAt(doc: Document, x: number, y: number, content: string): SVGTextElement {
  const t = doc.createElementNS(SVG_NS, "text") as SVGTextElement;
  t.setAttribute("x", x.toFixed(1));
  t.setAttribute("y", y.toFixed(1));
  t.textContent = content;
  return t;
}

export function formatTick(v: number): string {
  if (v === 0) return "0";
  const a = Math.abs(v);
  if (a >= 10000) return `${(v / 1000).toFixed(0)}k`;
  if (a >= 100) return v.toFixed(0);
  if (a >= 1) return v.toFixed(1);
  return v.toFixed(3);
}
