import { afterAll, describe, expect, test } from "vitest";
import { Window } from "happy-dom";
import { formatTick, renderChart } from "../src/charts.js";

const win = new Window();
const doc = win.document;

afterAll(() => win.happyDOM.abort());

function host(): HTMLElement {
  const el = doc.createElement("div");
  doc.body.appendChild(el);
  return el as unknown as HTMLElement;
}

describe("renderChart", () => {
  test("one polyline per series, one vertex per point", () => {
    const el = host();
    renderChart(el, [1, 2, 3], [
      { label: "a", color: "#abc", points: [1, 2, 3] },
      { label: "b", color: "#def", points: [3, 2, 1] },
    ]);
    const lines = el.querySelectorAll("polyline.series");
    expect(lines.length).toBe(2);
    for (const line of lines) {
      expect(line.getAttribute("points")!.split(" ").length).toBe(3);
    }
    expect(lines[0].getAttribute("data-label")).toBe("a");
    expect(lines[1].getAttribute("data-label")).toBe("b");
  });

  test("null gap splits a series; isolated points become dots", () => {
    const el = host();
    // two singleton runs around the gap: no polyline at all, two circles
    renderChart(el, [1, 2, 3], [{ label: "w1", color: "#abc", points: [5, null, 7] }]);
    expect(el.querySelectorAll("polyline.series").length).toBe(0);
    expect(el.querySelectorAll("circle.series").length).toBe(2);

    // a two-point run plus a singleton: one of each
    renderChart(el, [1, 2, 3, 4], [{ label: "w1", color: "#abc", points: [5, 6, null, 7] }]);
    expect(el.querySelectorAll("polyline.series").length).toBe(1);
    expect(el.querySelectorAll("circle.series").length).toBe(1);
  });

  test("empty input renders a placeholder, not an error", () => {
    const el = host();
    expect(() => renderChart(el, [], [])).not.toThrow();
    const empty = el.querySelector("text.chart-empty");
    expect(empty).not.toBeNull();
    expect(empty!.textContent).toBe("no data yet");
    expect(el.querySelectorAll(".series").length).toBe(0);
  });

  test("all-null series counts as empty", () => {
    const el = host();
    renderChart(el, [1, 2], [{ label: "w1", color: "#abc", points: [null, null] }]);
    expect(el.querySelector("text.chart-empty")).not.toBeNull();
  });

  test("redraw replaces previous content", () => {
    const el = host();
    renderChart(el, [1, 2], [{ label: "a", color: "#abc", points: [1, 2] }]);
    renderChart(el, [1, 2, 3], [{ label: "a", color: "#abc", points: [1, 2, 3] }]);
    expect(el.querySelectorAll("svg").length).toBe(1);
    expect(el.querySelectorAll("polyline.series").length).toBe(1);
  });

  test("legend shows each label with its latest value", () => {
    const el = host();
    renderChart(el, [1, 2], [{ label: "power", color: "#abc", points: [10, 250] }]);
    const legend = el.querySelectorAll("text.legend");
    expect(legend.length).toBe(1);
    expect(legend[0].textContent).toBe("power 250");
  });

  test("legend is dropped when the series list gets crowded", () => {
    const el = host();
    const many = Array.from({ length: 7 }, (_, i) => ({
      label: `w${i}`,
      color: "#abc",
      points: [1, 2],
    }));
    renderChart(el, [1, 2], many);
    expect(el.querySelectorAll("text.legend").length).toBe(0);
    expect(el.querySelectorAll("polyline.series").length).toBe(7);
  });

  test("axis ticks use the supplied formatter", () => {
    const el = host();
    renderChart(el, [1, 2], [{ label: "err", color: "#abc", points: [0.5, 0.25] }], {
      yFormat: (v) => `${(v * 100).toFixed(0)}%`,
    });
    const ticks = [...el.querySelectorAll("text.tick")].map((t) => t.textContent);
    expect(ticks).toContain("0%");
    expect(ticks.some((t) => t!.endsWith("%"))).toBe(true);
  });
});

describe("formatTick", () => {
  test("scales across magnitudes", () => {
    expect(formatTick(0)).toBe("0");
    expect(formatTick(25000)).toBe("25k");
    expect(formatTick(250)).toBe("250");
    expect(formatTick(2.5)).toBe("2.5");
    expect(formatTick(0.0042)).toBe("0.004");
  });
});
