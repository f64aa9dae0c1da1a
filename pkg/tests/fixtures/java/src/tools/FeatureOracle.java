package tools;

import java.lang.reflect.*;

/**
 * Prints the structural features (ids 2-6) of each named class as seen by
 * Java reflection, one line per class: NAME F2F3F4F5F6. F3 holds when the
 * class or a superclass below Object declares a concrete hashCode().
 *
 * Usage: FeatureOracle NAME...
 */
public class FeatureOracle {
    static boolean declares(Class c, String name, Class ret, Class[] params) {
        try {
            Method m = c.getDeclaredMethod(name, params);
            return m.getReturnType() == ret;
        } catch (NoSuchMethodException e) {
            return false;
        }
    }

    public static void main(String[] args) throws Exception {
        for (int i = 0; i < args.length; i++) {
            Class c = Class.forName(args[i]);
            boolean f2 = declares(c, "readObject", Void.TYPE, new Class[] { java.io.ObjectInputStream.class });
            boolean f3 = declares(c, "hashCode", Integer.TYPE, new Class[0]);
            // an inherited concrete hashCode from below Object also counts
            for (Class s = c.getSuperclass(); !f3 && s != null && s != Object.class; s = s.getSuperclass()) {
                try {
                    Method m = s.getDeclaredMethod("hashCode", new Class[0]);
                    f3 = m.getReturnType() == Integer.TYPE && !Modifier.isAbstract(m.getModifiers());
                } catch (NoSuchMethodException e) {
                }
            }
            boolean f4 = false;
            Field[] fs = c.getDeclaredFields();
            for (int j = 0; j < fs.length; j++) {
                Class t = fs[j].getType();
                if (t == Object.class || t == Comparable.class || t == java.util.Comparator.class) f4 = true;
            }
            boolean f5 = c != java.util.Map.class && java.util.Map.class.isAssignableFrom(c);
            boolean f6 = c != java.util.Comparator.class && java.util.Comparator.class.isAssignableFrom(c);
            System.out.println(c.getName() + " " + (f2 ? 1 : 0) + (f3 ? 1 : 0) + (f4 ? 1 : 0) + (f5 ? 1 : 0) + (f6 ? 1 : 0));
        }
    }
}
