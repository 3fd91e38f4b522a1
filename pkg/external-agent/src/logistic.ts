/** Logistic map x_{n+1} = r * x_n * (1 - x_n), iterated in IEEE-754 doubles. */

export function logisticStep(r: number, x: number): number {
  return r * x * (1 - x);
}

export function logisticRun(r: number, x0: number, n: number): number {
  let x = x0;
  for (let i = 0; i < n; i++) {
    x = logisticStep(r, x);
  }
  return x;
}

export function* logisticSeries(r: number, x0: number, n: number): Generator<number> {
  let x = x0;
  for (let i = 0; i < n; i++) {
    x = logisticStep(r, x);
    yield x;
  }
}
