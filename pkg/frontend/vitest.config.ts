import { defineConfig } from 'vitest/config';

export default defineConfig({
    test: {
        include: ['test/**/*.test.ts'],
        testTimeout: 120_000,
        hookTimeout: 120_000,
        // Cluster tests spawn real processes and bind real ports; keep files
        // sequential so they never fight over the machine.
        fileParallelism: false,
    },
});
