import { describe, expect, it } from "vitest";

import { buildPalette, classForKey, UNDO_KEY } from "../src/palette.js";

describe("palette", () => {
  it("maps digits 1-9 then 0 then letters in class order", () => {
    const names = Array.from({ length: 14 }, (_, i) => `c${i}`);
    const palette = buildPalette(names);
    expect(palette.map((e) => e.key)).toEqual([
      "1", "2", "3", "4", "5", "6", "7", "8", "9", "0", "a", "b", "c", "d",
    ]);
    expect(palette[3]).toEqual({ key: "4", classId: 3, className: "c3" });
  });

  it("covers every class and rejects palettes past the key supply", () => {
    expect(buildPalette(Array(36).fill("x")).length).toBe(36);
    expect(() => buildPalette(Array(37).fill("x"))).toThrow();
  });

  it("never assigns the undo key to a class", () => {
    const palette = buildPalette(Array(36).fill("x"));
    expect(palette.some((e) => e.key === UNDO_KEY)).toBe(false);
  });

  it("resolves keys case-insensitively and rejects unmapped keys", () => {
    const palette = buildPalette(["road", "car", "tree"]);
    expect(classForKey(palette, "2")).toBe(1);
    expect(classForKey(palette, "x")).toBeNull();
    expect(classForKey(palette, "Enter")).toBeNull();
  });
});
